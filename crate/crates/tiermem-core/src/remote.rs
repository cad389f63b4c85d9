//! Peer-node component: the pool of unit remote blocks, activity tagging,
//! free-memory monitoring and victim selection.
//!
//! A block's tag records its last write time; reads leave it untouched.
//! Victim selection returns the block with the longest non-activity duration
//! (now minus last write), ties broken by lowest block id, so the coldest
//! block is evicted without querying any sender.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::types::{BlockId, DeviceId, PeerId};

/// What a pressured peer does with the chosen victim block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionPolicy {
    /// Ask the owning sender to migrate the block elsewhere.
    Migrate,
    /// Baseline: delete the block and notify the owner of the loss.
    Delete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivityTag {
    pub last_write_time: u64,
}

/// One unit remote memory block registered for a sender.
#[derive(Debug)]
pub struct RemoteBlock {
    pub id: BlockId,
    pub owner: DeviceId,
    pub tag: ActivityTag,
    data: Vec<u8>,
}

impl RemoteBlock {
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A peer node: total memory, scripted native-application usage, and the
/// block pool carved out of what remains.
#[derive(Debug)]
pub struct PeerNode {
    pub id: PeerId,
    pub total_bytes: u64,
    native_app_usage: u64,
    blocks: BTreeMap<BlockId, RemoteBlock>,
    block_bytes_total: u64,
    next_block: u64,
    pub failed: bool,
    /// At most one eviction in flight per peer.
    pub evicting: bool,
}

impl PeerNode {
    pub fn new(id: PeerId, total_bytes: u64) -> Self {
        PeerNode {
            id,
            total_bytes,
            native_app_usage: 0,
            blocks: BTreeMap::new(),
            block_bytes_total: 0,
            next_block: 0,
            failed: false,
            evicting: false,
        }
    }

    /// Free memory left for the block pool after native usage.
    pub fn free_bytes(&self) -> u64 {
        self.total_bytes
            .saturating_sub(self.native_app_usage)
            .saturating_sub(self.block_bytes_total)
    }

    pub fn native_app_usage(&self) -> u64 {
        self.native_app_usage
    }

    /// Applies a scripted pressure update. Usage is clamped so the
    /// accounting identity free = total - native - blocks stays non-negative.
    pub fn set_native_usage(&mut self, usage: u64) {
        self.native_app_usage = usage.min(self.total_bytes.saturating_sub(self.block_bytes_total));
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_ids(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.blocks.keys().copied()
    }

    pub fn block(&self, id: BlockId) -> Result<&RemoteBlock> {
        self.blocks.get(&id).ok_or(SimError::UnmappedBlock { peer: self.id, block: id })
    }

    /// Allocates a zero-initialized unit block for `owner`. Refused when the
    /// peer lacks free memory; the caller places elsewhere.
    pub fn allocate_block(&mut self, owner: DeviceId, bytes: u64, now: u64) -> Result<BlockId> {
        if self.free_bytes() < bytes {
            return Err(SimError::AllocationRefused { peer: self.id, bytes });
        }
        let id = BlockId(self.next_block);
        self.next_block += 1;
        self.blocks.insert(
            id,
            RemoteBlock {
                id,
                owner,
                tag: ActivityTag { last_write_time: now },
                data: vec![0u8; bytes as usize],
            },
        );
        self.block_bytes_total += bytes;
        Ok(id)
    }

    /// Removes a block, returning its memory to the free pool.
    pub fn delete_block(&mut self, id: BlockId) -> Result<RemoteBlock> {
        let block = self
            .blocks
            .remove(&id)
            .ok_or(SimError::UnmappedBlock { peer: self.id, block: id })?;
        self.block_bytes_total -= block.data.len() as u64;
        Ok(block)
    }

    /// One-sided write into a block. Updates the activity tag.
    pub fn write_block(&mut self, id: BlockId, offset: usize, bytes: &[u8], now: u64) -> Result<()> {
        let peer = self.id;
        let block = self
            .blocks
            .get_mut(&id)
            .ok_or(SimError::UnmappedBlock { peer, block: id })?;
        if offset + bytes.len() > block.data.len() {
            return Err(SimError::BlockRange {
                offset: offset as u64,
                len: bytes.len() as u64,
                block_len: block.data.len() as u64,
            });
        }
        block.data[offset..offset + bytes.len()].copy_from_slice(bytes);
        debug_assert!(block.tag.last_write_time <= now);
        block.tag.last_write_time = now;
        Ok(())
    }

    /// One-sided read. Does not touch the activity tag: only writes stamp.
    pub fn read_block(&self, id: BlockId, offset: usize, len: usize) -> Result<&[u8]> {
        let block = self.block(id)?;
        if offset + len > block.data.len() {
            return Err(SimError::BlockRange {
                offset: offset as u64,
                len: len as u64,
                block_len: block.data.len() as u64,
            });
        }
        Ok(&block.data[offset..offset + len])
    }

    /// Overwrites a block's full contents (migration copy target) and stamps
    /// the tag, making the freshly copied block the most active.
    pub fn install_block_data(&mut self, id: BlockId, data: &[u8], now: u64) -> Result<()> {
        self.write_block(id, 0, data, now)
    }

    /// now - last_write_time for one block.
    pub fn non_activity_duration(&self, id: BlockId, now: u64) -> Result<u64> {
        let block = self.block(id)?;
        Ok(now.saturating_sub(block.tag.last_write_time))
    }

    /// The block with the longest non-activity duration; ties go to the
    /// lowest block id. BTreeMap iteration is id-ascending, so keeping the
    /// first strict maximum implements the tie-break.
    pub fn select_victim(&self, now: u64) -> Result<BlockId> {
        let mut best: Option<(u64, BlockId)> = None;
        for (&id, block) in &self.blocks {
            let d = now.saturating_sub(block.tag.last_write_time);
            match best {
                Some((dur, _)) if d <= dur => {}
                _ => best = Some((d, id)),
            }
        }
        best.map(|(_, id)| id)
            .ok_or_else(|| SimError::Invariant(format!("select_victim on empty pool of {}", self.id)))
    }

    /// free = total - native - blocks, checked after mutations.
    pub fn check_accounting(&self) -> Result<()> {
        let sum: u64 = self.blocks.values().map(|b| b.data.len() as u64).sum();
        if sum != self.block_bytes_total {
            return Err(SimError::Invariant(format!(
                "{}: block bytes {} != tracked {}",
                self.id, sum, self.block_bytes_total
            )));
        }
        if self.native_app_usage + sum > self.total_bytes {
            return Err(SimError::Invariant(format!("{}: memory over-committed", self.id)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GB: u64 = 1 << 30;

    #[test]
    fn allocate_and_refuse() {
        let mut p = PeerNode::new(PeerId(0), 3 * GB);
        let b = p.allocate_block(DeviceId(0), GB, 0).unwrap();
        assert_eq!(p.free_bytes(), 2 * GB);
        assert_eq!(p.block(b).unwrap().len() as u64, GB);

        let mut small = PeerNode::new(PeerId(1), GB / 2);
        assert!(matches!(
            small.allocate_block(DeviceId(0), GB, 0),
            Err(SimError::AllocationRefused { .. })
        ));
    }

    #[test]
    fn two_senders_get_distinct_blocks_and_owners() {
        let mut p = PeerNode::new(PeerId(0), 4 * GB);
        let a = p.allocate_block(DeviceId(0), GB, 0).unwrap();
        let b = p.allocate_block(DeviceId(1), GB, 0).unwrap();
        assert_ne!(a, b);
        assert_eq!(p.block(a).unwrap().owner, DeviceId(0));
        assert_eq!(p.block(b).unwrap().owner, DeviceId(1));
        p.check_accounting().unwrap();
    }

    #[test]
    fn non_activity_duration_formula() {
        let mut p = PeerNode::new(PeerId(0), 4 * GB);
        let b = p.allocate_block(DeviceId(0), 4096, 0).unwrap();
        p.write_block(b, 0, &[1u8; 16], 15).unwrap();
        assert_eq!(p.non_activity_duration(b, 20).unwrap(), 5);
        assert_eq!(p.non_activity_duration(b, 15).unwrap(), 0);
        assert!(p.non_activity_duration(BlockId(99), 20).is_err());
    }

    #[test]
    fn victim_is_longest_idle_block() {
        let mut p = PeerNode::new(PeerId(0), 4 * GB);
        let b0 = p.allocate_block(DeviceId(0), 4096, 0).unwrap();
        let b1 = p.allocate_block(DeviceId(0), 4096, 0).unwrap();
        let b2 = p.allocate_block(DeviceId(0), 4096, 0).unwrap();
        p.write_block(b0, 0, &[0u8; 1], 3).unwrap();
        p.write_block(b1, 0, &[0u8; 1], 9).unwrap();
        p.write_block(b2, 0, &[0u8; 1], 15).unwrap();
        // Durations at now=16: {13, 7, 1}; the block stamped 3 wins.
        assert_eq!(p.non_activity_duration(b0, 16).unwrap(), 13);
        assert_eq!(p.non_activity_duration(b1, 16).unwrap(), 7);
        assert_eq!(p.non_activity_duration(b2, 16).unwrap(), 1);
        assert_eq!(p.select_victim(16).unwrap(), b0);
    }

    #[test]
    fn victim_single_block_and_empty_pool() {
        let mut p = PeerNode::new(PeerId(0), 4 * GB);
        assert!(p.select_victim(5).is_err());
        let b = p.allocate_block(DeviceId(0), 4096, 2).unwrap();
        assert_eq!(p.select_victim(5).unwrap(), b);
    }

    #[test]
    fn victim_tie_breaks_to_lowest_id() {
        let mut p = PeerNode::new(PeerId(0), 4 * GB);
        let b0 = p.allocate_block(DeviceId(0), 4096, 0).unwrap();
        let b1 = p.allocate_block(DeviceId(0), 4096, 0).unwrap();
        p.write_block(b0, 0, &[0u8; 1], 7).unwrap();
        p.write_block(b1, 0, &[0u8; 1], 7).unwrap();
        assert_eq!(p.select_victim(20).unwrap(), b0);
    }

    #[test]
    fn reads_do_not_change_victim_order() {
        let mut p = PeerNode::new(PeerId(0), 4 * GB);
        let b0 = p.allocate_block(DeviceId(0), 4096, 0).unwrap();
        let b1 = p.allocate_block(DeviceId(0), 4096, 0).unwrap();
        p.write_block(b0, 0, &[0u8; 1], 1).unwrap();
        p.write_block(b1, 0, &[0u8; 1], 2).unwrap();
        let _ = p.read_block(b0, 0, 1).unwrap();
        assert_eq!(p.select_victim(10).unwrap(), b0);
    }

    #[test]
    fn usage_clamps_to_accounting_identity() {
        let mut p = PeerNode::new(PeerId(0), 2 * GB);
        p.allocate_block(DeviceId(0), GB, 0).unwrap();
        p.set_native_usage(5 * GB);
        assert_eq!(p.native_app_usage(), GB);
        assert_eq!(p.free_bytes(), 0);
        p.check_accounting().unwrap();
    }

    #[test]
    fn delete_returns_memory() {
        let mut p = PeerNode::new(PeerId(0), 2 * GB);
        let b = p.allocate_block(DeviceId(0), GB, 0).unwrap();
        assert_eq!(p.free_bytes(), GB);
        p.delete_block(b).unwrap();
        assert_eq!(p.free_bytes(), 2 * GB);
        assert!(p.delete_block(b).is_err());
    }
}
