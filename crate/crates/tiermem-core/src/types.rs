//! Shared identifier types and small utilities used across the engine.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Page size in bytes. The whole engine is page-granular; all addresses are
/// page indices into the device's linear space.
pub const PAGE_SIZE: usize = 4096;

/// Identifier of a peer node in the cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PeerId(pub u32);

/// Identifier of a sender device (one linear address space).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceId(pub u32);

/// Identifier of a remote block on a peer. Unique per peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId(pub u64);

/// Index of a unit slab in the device's linear address space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlabId(pub u64);

/// A page address: index of a 4KB page in the device's linear space.
pub type PageAddr = u64;

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "D{}", self.0)
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "B{}", self.0)
    }
}

impl fmt::Display for SlabId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.0)
    }
}

/// Dense bitmap keyed by page index. Used for remote-ready, written and
/// disk-resident tracking.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PageBitmap {
    words: Vec<u64>,
    ones: u64,
}

impl PageBitmap {
    pub fn new(bits: u64) -> Self {
        let words = vec![0u64; ((bits + 63) / 64) as usize];
        PageBitmap { words, ones: 0 }
    }

    pub fn get(&self, idx: u64) -> bool {
        let w = (idx / 64) as usize;
        match self.words.get(w) {
            Some(word) => word & (1 << (idx % 64)) != 0,
            None => false,
        }
    }

    pub fn set(&mut self, idx: u64) {
        let w = (idx / 64) as usize;
        if w >= self.words.len() {
            self.words.resize(w + 1, 0);
        }
        let mask = 1 << (idx % 64);
        if self.words[w] & mask == 0 {
            self.words[w] |= mask;
            self.ones += 1;
        }
    }

    pub fn clear(&mut self, idx: u64) {
        let w = (idx / 64) as usize;
        if w < self.words.len() {
            let mask = 1 << (idx % 64);
            if self.words[w] & mask != 0 {
                self.words[w] &= !mask;
                self.ones -= 1;
            }
        }
    }

    pub fn count_ones(&self) -> u64 {
        self.ones
    }
}

/// Ceiling division for byte/message accounting.
pub fn div_ceil(a: u64, b: u64) -> u64 {
    debug_assert!(b > 0);
    (a + b - 1) / b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bitmap_set_get_clear() {
        let mut bm = PageBitmap::new(100);
        assert!(!bm.get(63));
        bm.set(63);
        bm.set(64);
        assert!(bm.get(63));
        assert!(bm.get(64));
        assert_eq!(bm.count_ones(), 2);
        bm.set(64);
        assert_eq!(bm.count_ones(), 2);
        bm.clear(64);
        assert!(!bm.get(64));
        assert_eq!(bm.count_ones(), 1);
        assert!(!bm.get(10_000));
    }

    #[test]
    fn div_ceil_rounds_up() {
        assert_eq!(div_ceil(0, 512), 0);
        assert_eq!(div_ceil(512, 512), 1);
        assert_eq!(div_ceil(513, 512), 2);
    }
}
