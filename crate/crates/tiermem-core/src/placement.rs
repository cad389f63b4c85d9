//! Slab-to-peer placement: partitions the linear address space into unit
//! slabs and maps each on demand to a remote block, by power-of-two choices
//! over advertised free memory (round-robin kept behind a switch for A/B
//! runs). Replicas repeat the choice excluding already-chosen peers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::types::{BlockId, PageAddr, PageBitmap, PeerId, SlabId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementPolicy {
    P2c,
    RoundRobin,
}

/// One mapped location of a slab: the primary or a replica.
#[derive(Debug)]
pub struct SlabLocation {
    pub peer: PeerId,
    pub block: BlockId,
    pub valid: bool,
    /// Which slab pages this location actually holds.
    pub pages: PageBitmap,
}

#[derive(Debug)]
pub struct SlabMapping {
    pub locations: Vec<SlabLocation>,
}

/// Sender-side mapping table from slab to remote locations.
#[derive(Debug)]
pub struct SlabMap {
    slab_pages: u64,
    slabs: Vec<Option<SlabMapping>>,
    rr_cursor: usize,
}

impl SlabMap {
    pub fn new(space_pages: u64, slab_pages: u64) -> Self {
        let nslabs = crate::types::div_ceil(space_pages, slab_pages) as usize;
        let mut slabs = Vec::with_capacity(nslabs);
        slabs.resize_with(nslabs, || None);
        SlabMap { slab_pages, slabs, rr_cursor: 0 }
    }

    pub fn slab_pages(&self) -> u64 {
        self.slab_pages
    }

    pub fn slab_count(&self) -> usize {
        self.slabs.len()
    }

    /// Pure arithmetic: slab id and the page offset within it.
    pub fn lookup(&self, addr: PageAddr) -> (SlabId, u64) {
        (SlabId(addr / self.slab_pages), addr % self.slab_pages)
    }

    pub fn mapping(&self, slab: SlabId) -> Option<&SlabMapping> {
        self.slabs.get(slab.0 as usize).and_then(|m| m.as_ref())
    }

    pub fn mapping_mut(&mut self, slab: SlabId) -> Option<&mut SlabMapping> {
        self.slabs.get_mut(slab.0 as usize).and_then(|m| m.as_mut())
    }

    pub fn is_mapped(&self, slab: SlabId) -> bool {
        self.mapping(slab).is_some()
    }

    pub fn install(&mut self, slab: SlabId, mapping: SlabMapping) {
        self.slabs[slab.0 as usize] = Some(mapping);
    }

    /// Swaps one location after a completed migration. Subsequent reads and
    /// drains target the new block.
    pub fn remap_slab(
        &mut self,
        slab: SlabId,
        loc_index: usize,
        new_peer: PeerId,
        new_block: BlockId,
    ) -> Result<()> {
        let slab_pages = self.slab_pages;
        let mapping = self
            .mapping_mut(slab)
            .ok_or_else(|| SimError::Invariant(format!("remap of unmapped slab {slab}")))?;
        let loc = &mut mapping.locations[loc_index];
        let mut pages = PageBitmap::new(slab_pages);
        std::mem::swap(&mut pages, &mut loc.pages);
        *loc = SlabLocation { peer: new_peer, block: new_block, valid: true, pages };
        Ok(())
    }

    /// Peers holding any location of this slab; replica placement and
    /// migration destinations must exclude them.
    pub fn peers_of(&self, slab: SlabId) -> Vec<PeerId> {
        self.mapping(slab)
            .map(|m| m.locations.iter().map(|l| l.peer).collect())
            .unwrap_or_default()
    }

    /// Blocks mapped per peer, for spread statistics.
    pub fn blocks_per_peer(&self) -> std::collections::BTreeMap<PeerId, usize> {
        let mut counts = std::collections::BTreeMap::new();
        for mapping in self.slabs.iter().flatten() {
            for loc in &mapping.locations {
                if loc.valid {
                    *counts.entry(loc.peer).or_insert(0) += 1;
                }
            }
        }
        counts
    }

    /// Picks a peer among `candidates` (peer, advertised free bytes).
    /// Power-of-two choices samples two distinct peers uniformly and keeps
    /// the one with more free memory; ties break to the lower peer id.
    pub fn choose_peer<R: Rng>(
        &mut self,
        policy: PlacementPolicy,
        rng: &mut R,
        candidates: &[(PeerId, u64)],
    ) -> Result<PeerId> {
        if candidates.is_empty() {
            return Err(SimError::Capacity { need: 1, have: 0 });
        }
        match policy {
            PlacementPolicy::RoundRobin => {
                let pick = candidates[self.rr_cursor % candidates.len()].0;
                self.rr_cursor += 1;
                Ok(pick)
            }
            PlacementPolicy::P2c => {
                if candidates.len() == 1 {
                    return Ok(candidates[0].0);
                }
                let i = rng.gen_range(0..candidates.len());
                let j = {
                    let delta = rng.gen_range(1..candidates.len());
                    (i + delta) % candidates.len()
                };
                let (a, b) = (candidates[i], candidates[j]);
                Ok(if a.1 > b.1 || (a.1 == b.1 && a.0 < b.0) { a.0 } else { b.0 })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lookup_arithmetic() {
        let m = SlabMap::new(4096, 512);
        assert_eq!(m.lookup(0), (SlabId(0), 0));
        assert_eq!(m.lookup(512), (SlabId(1), 0));
        assert_eq!(m.lookup(1023), (SlabId(1), 511));
        assert_eq!(m.slab_count(), 8);
    }

    #[test]
    fn lookup_is_bijective_over_mapped_space() {
        let m = SlabMap::new(2048, 256);
        let mut seen = std::collections::HashSet::new();
        for addr in 0..2048u64 {
            let key = m.lookup(addr);
            assert!(seen.insert(key), "collision at {addr}");
            // Invert: slab * slab_pages + offset == addr.
            assert_eq!(key.0 .0 * 256 + key.1, addr);
        }
    }

    #[test]
    fn p2c_picks_freer_of_two() {
        let mut m = SlabMap::new(1024, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // Exactly two candidates: choice must always be the freer one.
        for _ in 0..32 {
            let picked = m
                .choose_peer(
                    PlacementPolicy::P2c,
                    &mut rng,
                    &[(PeerId(0), 4 << 30), (PeerId(1), 7 << 30)],
                )
                .unwrap();
            assert_eq!(picked, PeerId(1));
        }
    }

    #[test]
    fn p2c_tie_breaks_to_lower_peer_id() {
        let mut m = SlabMap::new(1024, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..32 {
            let picked = m
                .choose_peer(
                    PlacementPolicy::P2c,
                    &mut rng,
                    &[(PeerId(3), 1 << 30), (PeerId(5), 1 << 30)],
                )
                .unwrap();
            assert_eq!(picked, PeerId(3));
        }
    }

    #[test]
    fn p2c_empty_candidates_is_capacity_error() {
        let mut m = SlabMap::new(1024, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            m.choose_peer(PlacementPolicy::P2c, &mut rng, &[]),
            Err(SimError::Capacity { .. })
        ));
    }

    #[test]
    fn round_robin_cycles() {
        let mut m = SlabMap::new(1024, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cands = [(PeerId(0), 1), (PeerId(1), 1), (PeerId(2), 1)];
        let picks: Vec<_> = (0..6)
            .map(|_| m.choose_peer(PlacementPolicy::RoundRobin, &mut rng, &cands).unwrap())
            .collect();
        assert_eq!(picks, vec![PeerId(0), PeerId(1), PeerId(2), PeerId(0), PeerId(1), PeerId(2)]);
    }

    #[test]
    fn p2c_spreads_load_over_equal_peers() {
        // With >=4 equal peers and many draws, max/min count ratio <= 2.
        let mut m = SlabMap::new(1 << 20, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = std::collections::BTreeMap::new();
        let mut free: std::collections::BTreeMap<PeerId, u64> =
            (0..6).map(|i| (PeerId(i), 1024u64)).collect();
        for _ in 0..600 {
            let cands: Vec<_> = free.iter().map(|(&p, &f)| (p, f)).collect();
            let pick = m.choose_peer(PlacementPolicy::P2c, &mut rng, &cands).unwrap();
            *counts.entry(pick).or_insert(0usize) += 1;
            *free.get_mut(&pick).unwrap() -= 1;
        }
        let max = counts.values().max().unwrap();
        let min = counts.values().min().unwrap();
        assert!(*min > 0);
        assert!(max / min <= 2, "spread too uneven: {counts:?}");
    }

    #[test]
    fn remap_swaps_location_and_keeps_pages() {
        let mut m = SlabMap::new(1024, 256);
        let mut pages = PageBitmap::new(256);
        pages.set(3);
        m.install(
            SlabId(0),
            SlabMapping {
                locations: vec![SlabLocation { peer: PeerId(0), block: BlockId(0), valid: true, pages }],
            },
        );
        m.remap_slab(SlabId(0), 0, PeerId(4), BlockId(9)).unwrap();
        let loc = &m.mapping(SlabId(0)).unwrap().locations[0];
        assert_eq!(loc.peer, PeerId(4));
        assert_eq!(loc.block, BlockId(9));
        assert!(loc.pages.get(3), "page bits move with the data");
    }
}
