//! Host-coordinated dynamic local memory pool.
//!
//! Pre-allocated pages are handed out first; the pool grows by a configurable
//! step when usage crosses the grow trigger and shrinks when the host
//! free-memory signal drops, never leaving the `[min_pool_pages,
//! max_pool_pages]` band. Pages cycle through three observable states:
//!
//!   free → in use (staged, pending drain) → drained (reclaimable, still
//!   cached and readable) → reclaimed (handed back out) or released (shrink)
//!
//! A page referenced by more than one staged write carries the update flag;
//! such a page is never reclaimed until its last pending drain completes.
//! Reclaim picks victims in LRU order; the stamp is touched on both read
//! hits and writes.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::types::{PageAddr, PAGE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub min_pool_pages: usize,
    pub max_pool_pages: usize,
    /// Usage fraction at which growth fires.
    pub grow_trigger_ratio: f64,
    /// Fraction of host free memory the pool may occupy.
    pub host_free_cap_ratio: f64,
    /// Growth increment as a fraction of the current size.
    pub grow_step_ratio: f64,
    pub page_size: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            min_pool_pages: 1024,
            max_pool_pages: 65536,
            grow_trigger_ratio: 0.80,
            host_free_cap_ratio: 0.50,
            grow_step_ratio: 0.25,
            page_size: PAGE_SIZE,
        }
    }
}

impl PoolConfig {
    /// Fixed-size pool: no growth, no shrink below `pages`.
    pub fn fixed(pages: usize) -> Self {
        PoolConfig { min_pool_pages: pages, max_pool_pages: pages, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_pool_pages == 0 || self.min_pool_pages > self.max_pool_pages {
            return Err(SimError::Config(
                "mempool: 0 < min_pages <= max_pages required".into(),
            ));
        }
        if !(self.grow_trigger_ratio > 0.0 && self.grow_trigger_ratio < 1.0) {
            return Err(SimError::Config("mempool.grow_trigger must be in (0, 1)".into()));
        }
        if !(self.host_free_cap_ratio > 0.0 && self.host_free_cap_ratio <= 1.0) {
            return Err(SimError::Config("mempool.host_free_cap must be in (0, 1]".into()));
        }
        if self.grow_step_ratio <= 0.0 {
            return Err(SimError::Config("mempool.grow_step must be positive".into()));
        }
        if self.page_size == 0 {
            return Err(SimError::Config("mempool.page_size must be positive".into()));
        }
        Ok(())
    }
}

/// Scripted host free-memory signal, fed by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostMemorySignal {
    pub host_free_bytes: u64,
}

pub type PageId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotState {
    Free,
    InUse,
    /// Removed from circulation by a shrink. Reused first on growth.
    Retired,
}

#[derive(Debug)]
pub struct PageSlot {
    data: Box<[u8]>,
    state: SlotState,
    pub update_flag: bool,
    pub reclaimable_flag: bool,
    pub lru_stamp: u64,
    /// Staged-but-undrained write entries referencing this slot.
    pub pending_drains: u32,
    /// Page address currently cached in this slot, if any.
    pub owner: Option<PageAddr>,
    /// True once the slot has entered the reclaimable state at least once
    /// since it was handed out (keeps it in the LRU index even while a later
    /// update holds it non-reclaimable).
    indexed: bool,
}

impl PageSlot {
    fn new(page_size: usize) -> Self {
        PageSlot {
            data: vec![0u8; page_size].into_boxed_slice(),
            state: SlotState::Free,
            update_flag: false,
            reclaimable_flag: false,
            lru_stamp: 0,
            pending_drains: 0,
            owner: None,
            indexed: false,
        }
    }
}

/// Outcome of an allocation: a fresh free page, or a reclaimed one whose
/// previous address must be dropped from the page table by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocOutcome {
    pub page: PageId,
    pub reclaimed_from: Option<PageAddr>,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct PoolStats {
    pub grow_events: u64,
    pub shrink_events: u64,
    pub reclaims: u64,
}

#[derive(Debug)]
pub struct Pool {
    cfg: PoolConfig,
    slots: Vec<PageSlot>,
    free: VecDeque<PageId>,
    /// LRU index over drained-and-cached pages, keyed by stamp.
    lru: BTreeMap<u64, PageId>,
    next_stamp: u64,
    size: usize,
    in_use: usize,
    host_free_bytes: u64,
    /// Pages a shrink still owes once more pages become reclaimable.
    pub pending_shrink: usize,
    pub stats: PoolStats,
}

impl Pool {
    pub fn new(cfg: PoolConfig) -> Result<Pool> {
        cfg.validate()?;
        let mut pool = Pool {
            slots: Vec::with_capacity(cfg.min_pool_pages),
            free: VecDeque::with_capacity(cfg.min_pool_pages),
            lru: BTreeMap::new(),
            next_stamp: 1,
            size: cfg.min_pool_pages,
            in_use: 0,
            host_free_bytes: u64::MAX,
            pending_shrink: 0,
            stats: PoolStats::default(),
            cfg,
        };
        for i in 0..pool.cfg.min_pool_pages {
            pool.slots.push(PageSlot::new(pool.cfg.page_size));
            pool.free.push_back(i as PageId);
        }
        Ok(pool)
    }

    pub fn config(&self) -> &PoolConfig {
        &self.cfg
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn free_pages(&self) -> usize {
        self.free.len()
    }

    pub fn in_use(&self) -> usize {
        self.in_use
    }

    pub fn reclaimable_pages(&self) -> usize {
        self.lru.values().filter(|&&p| self.slots[p as usize].reclaimable_flag).count()
    }

    pub fn host_free_bytes(&self) -> u64 {
        self.host_free_bytes
    }

    fn next_stamp(&mut self) -> u64 {
        let s = self.next_stamp;
        self.next_stamp += 1;
        s
    }

    /// Cap on the pool size implied by the host free-memory signal.
    fn host_cap_pages(&self) -> usize {
        let bytes = self.host_free_bytes as f64 * self.cfg.host_free_cap_ratio;
        (bytes / self.cfg.page_size as f64).floor() as usize
    }

    /// Hands out a page. Pre-allocated free pages go first; at the grow
    /// trigger the pool attempts the growth step; with no free page left the
    /// LRU reclaimable page is recycled. Fails only when every page is
    /// pinned by staged writes and the pool cannot grow.
    pub fn alloc_page(&mut self) -> Result<AllocOutcome> {
        if self.in_use >= self.trigger_level() && self.size < self.cfg.max_pool_pages {
            self.maybe_grow();
        }
        if let Some(page) = self.free.pop_front() {
            self.activate(page);
            return Ok(AllocOutcome { page, reclaimed_from: None });
        }
        if let Some((page, prev)) = self.take_lru() {
            self.stats.reclaims += 1;
            self.activate(page);
            return Ok(AllocOutcome { page, reclaimed_from: prev });
        }
        Err(SimError::PoolExhausted)
    }

    fn trigger_level(&self) -> usize {
        (self.size as f64 * self.cfg.grow_trigger_ratio).ceil() as usize
    }

    fn activate(&mut self, page: PageId) {
        let stamp = self.next_stamp();
        let slot = &mut self.slots[page as usize];
        debug_assert_eq!(slot.state, SlotState::Free);
        slot.state = SlotState::InUse;
        slot.update_flag = false;
        slot.reclaimable_flag = false;
        slot.pending_drains = 0;
        slot.owner = None;
        slot.indexed = false;
        slot.lru_stamp = stamp;
        self.in_use += 1;
    }

    /// Pops the least-recently-used reclaimable page, skipping update-flagged
    /// pages. Returns the page and the address it used to cache.
    fn take_lru(&mut self) -> Option<(PageId, Option<PageAddr>)> {
        let mut skipped = Vec::new();
        let mut found = None;
        while let Some((&stamp, &page)) = self.lru.iter().next() {
            self.lru.remove(&stamp);
            let slot = &self.slots[page as usize];
            if slot.reclaimable_flag {
                found = Some(page);
                break;
            }
            // Update flag is examined and the page is skipped.
            skipped.push((stamp, page));
        }
        for (stamp, page) in skipped {
            self.lru.insert(stamp, page);
        }
        let page = found?;
        let slot = &mut self.slots[page as usize];
        let prev = slot.owner.take();
        slot.reclaimable_flag = false;
        slot.indexed = false;
        slot.state = SlotState::Free;
        self.in_use -= 1;
        // Contents untouched until reuse: reclaiming is a pointer move.
        Some((page, prev))
    }

    /// Reclaims up to `n` pages in LRU order into the free list, returning
    /// the pages and the addresses they cached. Pages with the update flag
    /// are skipped; fewer than `n` may be returned.
    pub fn reclaim_lru(&mut self, n: usize) -> Vec<(PageId, Option<PageAddr>)> {
        let mut out = Vec::new();
        for _ in 0..n {
            match self.take_lru() {
                Some((page, prev)) => {
                    self.stats.reclaims += 1;
                    let slot = &mut self.slots[page as usize];
                    slot.state = SlotState::Free;
                    self.free.push_back(page);
                    out.push((page, prev));
                }
                None => break,
            }
        }
        out
    }

    /// Grows by one step, bounded by `max_pool_pages` and the host
    /// free-memory cap. No-op when already capped.
    pub fn maybe_grow(&mut self) -> usize {
        let step = ((self.size as f64 * self.cfg.grow_step_ratio).ceil() as usize).max(1);
        let target = self
            .size
            .saturating_add(step)
            .min(self.cfg.max_pool_pages)
            .min(self.host_cap_pages().max(self.cfg.min_pool_pages));
        if target <= self.size {
            return self.size;
        }
        let mut needed = target - self.size;
        // Reuse retired slots before allocating new ones.
        for (i, slot) in self.slots.iter_mut().enumerate() {
            if needed == 0 {
                break;
            }
            if slot.state == SlotState::Retired {
                slot.state = SlotState::Free;
                self.free.push_back(i as PageId);
                needed -= 1;
            }
        }
        for _ in 0..needed {
            self.slots.push(PageSlot::new(self.cfg.page_size));
            self.free.push_back((self.slots.len() - 1) as PageId);
        }
        self.size = target;
        self.stats.grow_events += 1;
        self.size
    }

    /// Applies a host free-memory signal update and shrinks if the pool now
    /// exceeds its share. Only free and reclaimable pages are released; if
    /// the target cannot be met yet, the remainder is owed and collected as
    /// drains complete (`continue_shrink`). Never drops below
    /// `min_pool_pages`. Returns the addresses whose cached pages were
    /// released; the caller must drop them from its page table.
    pub fn maybe_shrink(&mut self, signal: HostMemorySignal) -> Vec<PageAddr> {
        self.host_free_bytes = signal.host_free_bytes;
        let target = self.host_cap_pages().max(self.cfg.min_pool_pages);
        if target >= self.size {
            self.pending_shrink = 0;
            return Vec::new();
        }
        self.pending_shrink = self.size - target;
        self.continue_shrink()
    }

    /// Releases owed pages while any are free or reclaimable.
    pub fn continue_shrink(&mut self) -> Vec<PageAddr> {
        let mut evicted = Vec::new();
        let mut released = 0;
        while self.pending_shrink > 0 && self.size > self.cfg.min_pool_pages {
            if let Some(page) = self.free.pop_front() {
                self.slots[page as usize].state = SlotState::Retired;
            } else if let Some((page, prev)) = self.take_lru() {
                self.slots[page as usize].state = SlotState::Retired;
                if let Some(addr) = prev {
                    evicted.push(addr);
                }
            } else {
                break;
            }
            self.size -= 1;
            self.pending_shrink -= 1;
            released += 1;
        }
        if self.size == self.cfg.min_pool_pages {
            self.pending_shrink = 0;
        }
        if released > 0 {
            self.stats.shrink_events += 1;
        }
        evicted
    }

    /// Touch-on-access: refreshes the LRU stamp on read hits and writes.
    pub fn touch(&mut self, page: PageId) {
        let stamp = self.next_stamp();
        let slot = &mut self.slots[page as usize];
        let old = slot.lru_stamp;
        slot.lru_stamp = stamp;
        if slot.indexed {
            if let Some(p) = self.lru.remove(&old) {
                debug_assert_eq!(p, page);
            }
            self.lru.insert(stamp, page);
        }
    }

    /// Marks a slot as referenced by a newly staged write entry. On a
    /// re-write of a still-tracked page the update flag engages and the
    /// reclaimable flag drops, pinning the slot until the latest entry
    /// drains.
    pub fn mark_staged(&mut self, page: PageId) {
        let slot = &mut self.slots[page as usize];
        let was_tracked = slot.pending_drains > 0 || slot.indexed;
        slot.pending_drains += 1;
        if was_tracked {
            slot.update_flag = true;
        }
        slot.reclaimable_flag = false;
        self.touch(page);
    }

    /// Acknowledges one drained entry referencing this slot. When the last
    /// pending drain completes the update flag clears and the page becomes
    /// reclaimable.
    pub fn drain_ack(&mut self, page: PageId) {
        let slot = &mut self.slots[page as usize];
        debug_assert!(slot.pending_drains > 0, "drain_ack without pending drain");
        slot.pending_drains -= 1;
        if slot.pending_drains == 0 {
            slot.update_flag = false;
            if slot.state == SlotState::InUse {
                slot.reclaimable_flag = true;
                if !slot.indexed {
                    slot.indexed = true;
                    self.lru.insert(slot.lru_stamp, page);
                }
            }
        }
    }

    pub fn set_owner(&mut self, page: PageId, addr: PageAddr) {
        self.slots[page as usize].owner = Some(addr);
    }

    pub fn slot(&self, page: PageId) -> &PageSlot {
        &self.slots[page as usize]
    }

    pub fn data(&self, page: PageId) -> &[u8] {
        &self.slots[page as usize].data
    }

    pub fn write_data(&mut self, page: PageId, bytes: &[u8]) {
        let slot = &mut self.slots[page as usize];
        slot.data[..bytes.len()].copy_from_slice(bytes);
    }

    /// free + in-use == size, the no-leak invariant.
    pub fn check_balance(&self) -> Result<()> {
        if self.free.len() + self.in_use != self.size {
            return Err(SimError::Invariant(format!(
                "pool leak: free {} + in_use {} != size {}",
                self.free.len(),
                self.in_use,
                self.size
            )));
        }
        if self.size < self.cfg.min_pool_pages || self.size > self.cfg.max_pool_pages {
            return Err(SimError::Invariant(format!(
                "pool size {} outside [{}, {}]",
                self.size, self.cfg.min_pool_pages, self.cfg.max_pool_pages
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(min: usize, max: usize) -> Pool {
        Pool::new(PoolConfig { min_pool_pages: min, max_pool_pages: max, ..Default::default() })
            .unwrap()
    }

    #[test]
    fn prealloc_first_no_growth_below_trigger() {
        let mut p = pool(1000, 4000);
        for _ in 0..799 {
            p.alloc_page().unwrap();
        }
        assert_eq!(p.size(), 1000);
        let out = p.alloc_page().unwrap(); // 800th in use after this call
        assert!(out.reclaimed_from.is_none());
        assert_eq!(p.size(), 1000, "799 in use at call time: below trigger");
        assert_eq!(p.stats.grow_events, 0);
    }

    #[test]
    fn growth_fires_at_trigger() {
        let mut p = pool(1000, 4000);
        for _ in 0..800 {
            p.alloc_page().unwrap();
        }
        assert_eq!(p.size(), 1000);
        p.alloc_page().unwrap(); // 800 in use at call time: trigger
        assert_eq!(p.size(), 1250, "one 25% step");
        assert_eq!(p.stats.grow_events, 1);
        p.check_balance().unwrap();
    }

    #[test]
    fn growth_capped_by_host_free() {
        let mut p = pool(1000, 4000);
        // 16MB host free, 4KB pages: cap = 0.5 * 4096 pages = 2048.
        p.maybe_shrink(HostMemorySignal { host_free_bytes: 16 << 20 });
        assert_eq!(p.size(), 1000);
        loop {
            p.maybe_grow();
            if p.maybe_grow() == p.size() && p.size() >= 2048 {
                break;
            }
            if p.size() >= 2048 {
                break;
            }
        }
        assert_eq!(p.size(), 2048);
        assert_eq!(p.maybe_grow(), 2048, "no-op at the cap");
    }

    #[test]
    fn growth_noop_at_max() {
        let mut p = pool(100, 100);
        assert_eq!(p.maybe_grow(), 100);
    }

    #[test]
    fn growth_noop_at_zero_host_free() {
        let mut p = pool(100, 400);
        p.maybe_shrink(HostMemorySignal { host_free_bytes: 0 });
        assert_eq!(p.size(), 100, "shrink stops at min_pool_pages");
        assert_eq!(p.maybe_grow(), 100);
    }

    #[test]
    fn exhausted_when_all_pages_staged() {
        let mut p = pool(4, 4);
        for i in 0..4 {
            let o = p.alloc_page().unwrap();
            p.set_owner(o.page, i as u64);
            p.mark_staged(o.page);
        }
        // All pages pinned by staged entries: nothing reclaimable.
        assert!(matches!(p.alloc_page(), Err(SimError::PoolExhausted)));
        p.check_balance().unwrap();
    }

    #[test]
    fn reclaim_follows_lru_order_and_skips_update_flag() {
        let mut p = pool(8, 8);
        let a = p.alloc_page().unwrap().page;
        let b = p.alloc_page().unwrap().page;
        let c = p.alloc_page().unwrap().page;
        for (addr, page) in [(10u64, a), (11, b), (12, c)] {
            p.set_owner(page, addr);
            p.mark_staged(page);
        }
        p.drain_ack(a);
        p.drain_ack(b);
        // c stays staged (no ack): not reclaimable.
        let got = p.reclaim_lru(3);
        assert_eq!(got.len(), 2);
        assert_eq!(got[0], (a, Some(10)));
        assert_eq!(got[1], (b, Some(11)));

        // Re-stage a drained page: update flag set, reclaim skips it.
        let d = p.alloc_page().unwrap().page;
        p.set_owner(d, 13);
        p.mark_staged(d);
        p.drain_ack(d);
        assert!(p.slot(d).reclaimable_flag);
        p.mark_staged(d); // second write before reclaim
        assert!(p.slot(d).update_flag);
        assert!(!p.slot(d).reclaimable_flag);
        assert!(p.reclaim_lru(1).is_empty(), "only flagged page is indexed");
        p.drain_ack(d);
        assert!(!p.slot(d).update_flag);
        let got = p.reclaim_lru(1);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0, d);
    }

    #[test]
    fn empty_reclaimable_set_returns_empty() {
        let mut p = pool(4, 4);
        assert!(p.reclaim_lru(2).is_empty());
    }

    #[test]
    fn shrink_releases_now_and_owes_remainder() {
        let mut p = pool(100, 400);
        for _ in 0..300 {
            p.maybe_grow();
        }
        assert_eq!(p.size(), 400);
        // Occupy 150 pages, drain 100 of them.
        let mut staged = Vec::new();
        for i in 0..150u64 {
            let o = p.alloc_page().unwrap();
            p.set_owner(o.page, i);
            p.mark_staged(o.page);
            staged.push(o.page);
        }
        for &pg in staged.iter().take(100) {
            p.drain_ack(pg);
        }
        // Demand a shrink to 100 pages: 250 free + 100 reclaimable available,
        // 50 pinned by staging.
        p.maybe_shrink(HostMemorySignal { host_free_bytes: 100 * 2 * PAGE_SIZE as u64 });
        assert_eq!(p.size(), 150, "released free+reclaimable, 50 still pinned");
        assert_eq!(p.pending_shrink, 50);
        for &pg in staged.iter().skip(100) {
            p.drain_ack(pg);
        }
        p.continue_shrink();
        assert_eq!(p.size(), 100);
        assert_eq!(p.pending_shrink, 0);
        p.check_balance().unwrap();
    }

    #[test]
    fn shrink_never_drops_below_min() {
        let mut p = pool(100, 400);
        p.maybe_shrink(HostMemorySignal { host_free_bytes: 0 });
        assert_eq!(p.size(), 100);
    }

    #[test]
    fn shrink_noop_when_host_free_high() {
        let mut p = pool(100, 400);
        let before = p.size();
        p.maybe_shrink(HostMemorySignal { host_free_bytes: u64::MAX });
        assert_eq!(p.size(), before);
    }

    #[test]
    fn touch_reorders_lru() {
        let mut p = pool(8, 8);
        let a = p.alloc_page().unwrap().page;
        let b = p.alloc_page().unwrap().page;
        for (addr, page) in [(1u64, a), (2, b)] {
            p.set_owner(page, addr);
            p.mark_staged(page);
            p.drain_ack(page);
        }
        p.touch(a); // a becomes most recent
        let got = p.reclaim_lru(1);
        assert_eq!(got[0].0, b);
    }
}
