//! Sender-side device: global page table, staging/reclaimable queues, the
//! asynchronous drainer with message coalescing, and the local disk sink.
//!
//! A write terminates at the mempool: pages are copied in, the page table
//! points at them, and a write entry lands in the staging queue. Nothing on
//! that path touches the network or the disk. The drainer later takes
//! entries in sequence order, coalesces contiguous pages up to the message
//! size, writes them to the mapped remote block (and replicas), and only
//! then do the pages become reclaimable.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::latency::{ChargeKind, Lane, Trace};
use crate::mempool::{PageId, Pool, PoolConfig};
use crate::placement::{PlacementPolicy, SlabMap};
use crate::types::{DeviceId, PageAddr, PageBitmap, SlabId, PAGE_SIZE};

/// When the local disk sink is written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiskBackup {
    Off,
    Always,
    OnRemoteFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPolicy {
    /// Peers holding each slab, the primary included. 1 means no replicas.
    pub replication: u32,
    pub disk_backup: DiskBackup,
}

impl Default for FaultPolicy {
    fn default() -> Self {
        FaultPolicy { replication: 1, disk_backup: DiskBackup::Off }
    }
}

impl FaultPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.replication == 0 {
            return Err(SimError::Config("fault.replication must be >= 1".into()));
        }
        Ok(())
    }
}

/// Whether the drainer sends eagerly or only under memory pressure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrainMode {
    Eager,
    Lazy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub space_pages: u64,
    pub block_io_bytes: usize,
    pub message_bytes: usize,
    /// Capacity of the staging queue; the reclaimable queue matches it.
    pub queue_entries: usize,
    pub slab_pages: u64,
    pub placement: PlacementPolicy,
    pub drain_mode: DrainMode,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            space_pages: 1 << 20,
            block_io_bytes: 64 * 1024,
            message_bytes: 512 * 1024,
            queue_entries: 1024,
            slab_pages: (1 << 30) / PAGE_SIZE as u64,
            placement: PlacementPolicy::P2c,
            drain_mode: DrainMode::Eager,
        }
    }
}

impl DeviceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.space_pages == 0 {
            return Err(SimError::Config("device.space_bytes must be positive".into()));
        }
        if self.block_io_bytes == 0 || self.block_io_bytes % PAGE_SIZE != 0 {
            return Err(SimError::Config(
                "device.block_io_kb must be a positive multiple of the page size".into(),
            ));
        }
        if self.message_bytes < PAGE_SIZE {
            return Err(SimError::Config("device.message_kb must hold at least one page".into()));
        }
        if self.queue_entries == 0 {
            return Err(SimError::Config("device.queue_entries must be positive".into()));
        }
        if self.slab_pages == 0 {
            return Err(SimError::Config("placement.slab_mb must be positive".into()));
        }
        Ok(())
    }

    pub fn slab_bytes(&self) -> u64 {
        self.slab_pages * PAGE_SIZE as u64
    }
}

/// Radix-style map from page address to the mempool page caching it.
/// Presence means the freshest copy of the page is local.
#[derive(Debug, Default)]
pub struct GlobalPageTable {
    map: BTreeMap<PageAddr, PageId>,
}

impl GlobalPageTable {
    pub fn lookup(&self, addr: PageAddr) -> Option<PageId> {
        self.map.get(&addr).copied()
    }

    pub fn insert(&mut self, addr: PageAddr, page: PageId) {
        self.map.insert(addr, page);
    }

    pub fn remove(&mut self, addr: PageAddr) -> Option<PageId> {
        self.map.remove(&addr)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// One write transaction: the pages and base offset of a single block-I/O
/// request, tracked from staging to the reclaimable queue.
#[derive(Debug, Clone)]
pub struct WriteEntry {
    pub seq: u64,
    pub base: PageAddr,
    pub pages: Vec<PageId>,
    pub slab: SlabId,
    pub enqueued_at: u64,
}

impl WriteEntry {
    pub fn page_count(&self) -> u64 {
        self.pages.len() as u64
    }

    pub fn bytes(&self) -> u64 {
        self.page_count() * PAGE_SIZE as u64
    }
}

/// A drained entry parked in the reclaimable queue until it retires.
#[derive(Debug, Clone)]
pub struct RetiredEntry {
    pub seq: u64,
    pub base: PageAddr,
    pub pages: Vec<PageId>,
}

/// The batch of front staging entries currently being sent.
#[derive(Debug)]
pub struct InflightBatch {
    pub done_at: u64,
    /// Number of front staging entries in this batch.
    pub count: usize,
    pub slab: SlabId,
    pub bytes: u64,
    /// True when at least one remote location took the write.
    pub any_remote_ok: bool,
}

#[derive(Debug, Default)]
pub struct Drainer {
    pub busy_until: u64,
    pub inflight: Option<InflightBatch>,
    /// Test hook: a stalled drainer makes pool exhaustion observable.
    pub stalled: bool,
    /// Lazy mode only: set while pressure demands draining.
    pub gate_open: bool,
    /// Set when mapping failed for lack of cluster capacity; retried on the
    /// next pump.
    pub blocked_on_capacity: bool,
}

/// A disk-sink job captured at drain time (the mempool page may be reused
/// before the disk write lands).
#[derive(Debug)]
pub struct DiskJob {
    pub enqueued_at: u64,
    pub base: PageAddr,
    pub bytes: Vec<u8>,
}

/// Asynchronous local disk backup: a real file per device.
#[derive(Debug)]
pub struct DiskSink {
    file: File,
    pub bits: PageBitmap,
    pub queue: VecDeque<DiskJob>,
    pub busy_until: u64,
}

impl DiskSink {
    fn new(space_pages: u64) -> Result<DiskSink> {
        Ok(DiskSink {
            file: tempfile::tempfile()?,
            bits: PageBitmap::new(space_pages),
            queue: VecDeque::new(),
            busy_until: 0,
        })
    }

    pub fn enqueue(&mut self, enqueued_at: u64, base: PageAddr, bytes: Vec<u8>) {
        self.queue.push_back(DiskJob { enqueued_at, base, bytes });
    }

    /// Completion time of the head job, if any.
    pub fn next_done(&self, disk_write: u64) -> Option<u64> {
        let head = self.queue.front()?;
        Some(self.busy_until.max(head.enqueued_at) + disk_write)
    }

    /// Writes the head job to the file and charges it.
    pub fn complete_head(&mut self, trace: &mut Trace, device: DeviceId, disk_write: u64) -> Result<()> {
        let Some(job) = self.queue.pop_front() else { return Ok(()) };
        let start = self.busy_until.max(job.enqueued_at);
        trace.charge_at(start, Lane::DiskSink(device), ChargeKind::DiskWrite, disk_write, None);
        self.busy_until = start + disk_write;
        self.file.seek(SeekFrom::Start(job.base * PAGE_SIZE as u64))?;
        self.file.write_all(&job.bytes)?;
        let pages = job.bytes.len() / PAGE_SIZE;
        for i in 0..pages {
            self.bits.set(job.base + i as u64);
        }
        Ok(())
    }

    /// Reads one page: the pending queue is consulted newest-first (it holds
    /// data not yet on the platter), then the file.
    pub fn read_page(&mut self, addr: PageAddr) -> Result<Option<(Vec<u8>, bool)>> {
        for job in self.queue.iter().rev() {
            let pages = job.bytes.len() / PAGE_SIZE;
            if addr >= job.base && addr < job.base + pages as u64 {
                let off = (addr - job.base) as usize * PAGE_SIZE;
                return Ok(Some((job.bytes[off..off + PAGE_SIZE].to_vec(), false)));
            }
        }
        if self.bits.get(addr) {
            let mut buf = vec![0u8; PAGE_SIZE];
            self.file.seek(SeekFrom::Start(addr * PAGE_SIZE as u64))?;
            self.file.read_exact(&mut buf)?;
            return Ok(Some((buf, true)));
        }
        Ok(None)
    }

    pub fn has_page(&self, addr: PageAddr) -> bool {
        if self.bits.get(addr) {
            return true;
        }
        self.queue.iter().any(|job| {
            let pages = (job.bytes.len() / PAGE_SIZE) as u64;
            addr >= job.base && addr < job.base + pages
        })
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct DeviceMetrics {
    pub write_ops: u64,
    pub read_ops: u64,
    pub local_page_hits: u64,
    pub remote_page_hits: u64,
    pub disk_page_hits: u64,
    pub stall_units: u64,
    pub drained_entries: u64,
    pub drained_bytes: u64,
}

/// One block-device-like front end over the cluster.
#[derive(Debug)]
pub struct Device {
    pub id: DeviceId,
    pub cfg: DeviceConfig,
    pub fault: FaultPolicy,
    pub pool: Pool,
    pub gpt: GlobalPageTable,
    pub staging: VecDeque<WriteEntry>,
    pub reclaimable: VecDeque<RetiredEntry>,
    pub slabs: SlabMap,
    /// Slabs with an in-progress migration; their entries hold in staging.
    pub held: BTreeSet<SlabId>,
    /// Page has a readable copy on at least one valid remote location.
    pub remote_ready: PageBitmap,
    /// Page has ever been written through this device.
    pub written: PageBitmap,
    pub disk: DiskSink,
    pub drainer: Drainer,
    pub metrics: DeviceMetrics,
    next_seq: u64,
}

impl Device {
    pub fn new(id: DeviceId, cfg: DeviceConfig, pool_cfg: PoolConfig, fault: FaultPolicy) -> Result<Device> {
        cfg.validate()?;
        fault.validate()?;
        let pool = Pool::new(pool_cfg)?;
        Ok(Device {
            id,
            fault,
            pool,
            gpt: GlobalPageTable::default(),
            staging: VecDeque::new(),
            reclaimable: VecDeque::new(),
            slabs: SlabMap::new(cfg.space_pages, cfg.slab_pages),
            held: BTreeSet::new(),
            remote_ready: PageBitmap::new(cfg.space_pages),
            written: PageBitmap::new(cfg.space_pages),
            disk: DiskSink::new(cfg.space_pages)?,
            drainer: Drainer {
                gate_open: matches!(cfg.drain_mode, DrainMode::Eager),
                ..Default::default()
            },
            metrics: DeviceMetrics::default(),
            next_seq: 0,
            cfg,
        })
    }

    pub fn next_seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    pub fn staging_full(&self) -> bool {
        self.staging.len() >= self.cfg.queue_entries
    }

    pub fn validate_range(&self, addr: PageAddr, pages: u64) -> Result<()> {
        if addr + pages > self.cfg.space_pages {
            return Err(SimError::AddressRange { addr, space_pages: self.cfg.space_pages });
        }
        Ok(())
    }

    /// Splits a client request at slab boundaries; each piece becomes one
    /// write entry so a drain targets exactly one remote block.
    pub fn split_by_slab(&self, addr: PageAddr, pages: u64) -> Vec<(PageAddr, u64)> {
        let mut chunks = Vec::new();
        let mut at = addr;
        let mut left = pages;
        while left > 0 {
            let room = self.cfg.slab_pages - (at % self.cfg.slab_pages);
            let take = room.min(left);
            chunks.push((at, take));
            at += take;
            left -= take;
        }
        chunks
    }

    /// Pages in `[addr, addr+pages)` that would need a fresh pool page.
    pub fn pages_needing_alloc(&self, addr: PageAddr, pages: u64) -> usize {
        (0..pages).filter(|i| self.gpt.lookup(addr + i).is_none()).count()
    }

    /// Copies one request chunk into the mempool and stages its entry.
    /// The caller has already guaranteed pool capacity and staging room.
    pub fn stage_chunk(&mut self, at: u64, base: PageAddr, data: &[u8]) -> Result<&WriteEntry> {
        let npages = data.len() / PAGE_SIZE;
        let mut page_ids = Vec::with_capacity(npages);
        for i in 0..npages {
            let addr = base + i as u64;
            let chunk = &data[i * PAGE_SIZE..(i + 1) * PAGE_SIZE];
            let page = match self.gpt.lookup(addr) {
                Some(page) => page,
                None => {
                    let out = self.pool.alloc_page()?;
                    if let Some(prev) = out.reclaimed_from {
                        self.gpt.remove(prev);
                    }
                    self.pool.set_owner(out.page, addr);
                    self.gpt.insert(addr, out.page);
                    out.page
                }
            };
            self.pool.write_data(page, chunk);
            self.pool.mark_staged(page);
            self.written.set(addr);
            page_ids.push(page);
        }
        let seq = self.next_seq();
        let (slab, _) = self.slabs.lookup(base);
        self.staging.push_back(WriteEntry { seq, base, pages: page_ids, slab, enqueued_at: at });
        Ok(self.staging.back().expect("just pushed"))
    }

    /// The batch the drainer would send next: the front entry plus following
    /// entries that are already enqueued at `start`, target the same slab,
    /// are page-contiguous and fit in one message. Returns none while a
    /// batch is in flight, the drainer is stalled or gated, the head's slab
    /// is held, or staging is empty.
    pub fn plan_batch(&self) -> Option<(u64, InflightBatch)> {
        if self.drainer.inflight.is_some() || self.drainer.stalled || !self.drainer.gate_open {
            return None;
        }
        let head = self.staging.front()?;
        if self.held.contains(&head.slab) {
            return None;
        }
        let start = self.drainer.busy_until.max(head.enqueued_at);
        let mut count = 1;
        let mut bytes = head.bytes();
        let mut next_addr = head.base + head.page_count();
        for entry in self.staging.iter().skip(1) {
            if entry.enqueued_at > start
                || entry.slab != head.slab
                || entry.base != next_addr
                || bytes + entry.bytes() > self.cfg.message_bytes as u64
            {
                break;
            }
            bytes += entry.bytes();
            next_addr += entry.page_count();
            count += 1;
        }
        Some((
            start,
            InflightBatch { done_at: start, count, slab: head.slab, bytes, any_remote_ok: false },
        ))
    }

    /// Contiguous payload of the front `count` staging entries, captured
    /// from the mempool at send time.
    pub fn batch_payload(&self, count: usize) -> (PageAddr, Vec<u8>) {
        let base = self.staging.front().expect("batch exists").base;
        let mut buf = Vec::new();
        for entry in self.staging.iter().take(count) {
            for &page in &entry.pages {
                buf.extend_from_slice(self.pool.data(page));
            }
        }
        (base, buf)
    }

    /// Applies the effects of a finished batch: acks every page, moves the
    /// entries to the reclaimable queue (retiring overflow), and marks the
    /// pages remote-ready when a remote location took the data. Returns the
    /// sequence numbers drained (migration sessions watch these).
    pub fn complete_batch(&mut self) -> Vec<u64> {
        let Some(batch) = self.drainer.inflight.take() else { return Vec::new() };
        let mut seqs = Vec::with_capacity(batch.count);
        for _ in 0..batch.count {
            let entry = self.staging.pop_front().expect("inflight entries stay staged");
            for (i, &page) in entry.pages.iter().enumerate() {
                self.pool.drain_ack(page);
                if batch.any_remote_ok {
                    self.remote_ready.set(entry.base + i as u64);
                }
            }
            self.metrics.drained_entries += 1;
            self.metrics.drained_bytes += entry.bytes();
            seqs.push(entry.seq);
            if self.reclaimable.len() >= self.cfg.queue_entries {
                self.reclaimable.pop_front(); // oldest entry retires
            }
            self.reclaimable.push_back(RetiredEntry {
                seq: entry.seq,
                base: entry.base,
                pages: entry.pages,
            });
        }
        // A shrink may have been waiting for these pages.
        if self.pool.pending_shrink > 0 {
            for addr in self.pool.continue_shrink() {
                self.gpt.remove(addr);
            }
        }
        seqs
    }

    /// Recomputes the remote-ready bit for every page of a slab from the
    /// surviving valid locations. Used after a location is invalidated.
    pub fn rebuild_remote_ready(&mut self, slab: SlabId) {
        let base = slab.0 * self.cfg.slab_pages;
        let end = (base + self.cfg.slab_pages).min(self.cfg.space_pages);
        for addr in base..end {
            let off = addr - base;
            let ready = self
                .slabs
                .mapping(slab)
                .map(|m| m.locations.iter().any(|l| l.valid && l.pages.get(off)))
                .unwrap_or(false);
            if ready {
                self.remote_ready.set(addr);
            } else {
                self.remote_ready.clear(addr);
            }
        }
    }
}
