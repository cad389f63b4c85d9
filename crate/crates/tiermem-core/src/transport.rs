//! In-process message layer between sender devices and peer nodes.
//!
//! Provides one-sided-style page reads/writes (no peer compute on the data
//! path) and a synchronous control channel, all charged against the latency
//! model. Connect charges apply exactly once per (sender, peer) pair and are
//! free afterwards. Peer failure is injected through the simulator API, not
//! detected by timeout.

use std::collections::BTreeSet;

use crate::error::{Result, SimError};
use crate::latency::{ChargeKind, Lane, LatencyModel, Trace};
use crate::remote::PeerNode;
use crate::types::{div_ceil, BlockId, DeviceId, PeerId, PAGE_SIZE};
use crate::wire::ControlMessage;

/// Cluster-facing view of one peer used by placement decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeerEndpoint {
    pub peer_id: PeerId,
    pub connected: bool,
    pub free_bytes: u64,
    pub mapped_block_count: usize,
}

/// The peers plus per-sender connection state.
#[derive(Debug)]
pub struct Cluster {
    pub latency: LatencyModel,
    pub peers: Vec<PeerNode>,
    connected: BTreeSet<(DeviceId, PeerId)>,
}

impl Cluster {
    pub fn new(latency: LatencyModel, peers: Vec<PeerNode>) -> Self {
        Cluster { latency, peers, connected: BTreeSet::new() }
    }

    pub fn peer(&self, id: PeerId) -> Result<&PeerNode> {
        self.peers.get(id.0 as usize).ok_or(SimError::UnknownPeer(id))
    }

    pub fn peer_mut(&mut self, id: PeerId) -> Result<&mut PeerNode> {
        self.peers.get_mut(id.0 as usize).ok_or(SimError::UnknownPeer(id))
    }

    pub fn endpoint(&self, device: DeviceId, id: PeerId) -> Result<PeerEndpoint> {
        let peer = self.peer(id)?;
        Ok(PeerEndpoint {
            peer_id: id,
            connected: self.connected.contains(&(device, id)),
            free_bytes: peer.free_bytes(),
            mapped_block_count: peer.block_count(),
        })
    }

    pub fn is_connected(&self, device: DeviceId, peer: PeerId) -> bool {
        self.connected.contains(&(device, peer))
    }

    /// Establishes (or reuses) the sender→peer connection. First call per
    /// pair charges `connect` at `at` on `lane`; afterwards idempotent at
    /// zero cost. Returns the completion time.
    pub fn connect(
        &mut self,
        trace: &mut Trace,
        lane: Lane,
        at: u64,
        device: DeviceId,
        peer: PeerId,
    ) -> Result<u64> {
        if (peer.0 as usize) >= self.peers.len() {
            return Err(SimError::UnknownPeer(peer));
        }
        if self.connected.insert((device, peer)) {
            trace.charge_at(at, lane, ChargeKind::Connect, self.latency.connect, Some(peer));
            Ok(at + self.latency.connect)
        } else {
            Ok(at)
        }
    }

    fn data_path_checks(&self, device: DeviceId, peer: PeerId) -> Result<()> {
        let node = self.peer(peer)?;
        if node.failed {
            return Err(SimError::PeerFailed(peer));
        }
        if !self.connected.contains(&(device, peer)) {
            return Err(SimError::NotConnected(peer));
        }
        Ok(())
    }

    /// Writes pages into a mapped block. Charges ceil(bytes / message_size)
    /// network messages starting at `at` and stamps the block's activity
    /// tag at the completion time. Returns the completion time.
    #[allow(clippy::too_many_arguments)]
    pub fn write_pages(
        &mut self,
        trace: &mut Trace,
        lane: Lane,
        at: u64,
        device: DeviceId,
        peer: PeerId,
        block: BlockId,
        offset_pages: u64,
        bytes: &[u8],
        message_size: usize,
    ) -> Result<u64> {
        self.data_path_checks(device, peer)?;
        if bytes.is_empty() {
            return Ok(at); // empty batch acks at zero charge
        }
        let messages = div_ceil(bytes.len() as u64, message_size as u64);
        let units = messages * self.latency.net_write;
        trace.charge_at(at, lane, ChargeKind::NetWrite, units, Some(peer));
        let done = at + units;
        let node = self.peers.get_mut(peer.0 as usize).expect("checked");
        node.write_block(block, offset_pages as usize * PAGE_SIZE, bytes, done)?;
        Ok(done)
    }

    /// Reads pages from a mapped block into a fresh buffer. Charges
    /// count × net_read. Does not update the activity tag.
    #[allow(clippy::too_many_arguments)]
    pub fn read_pages(
        &mut self,
        trace: &mut Trace,
        lane: Lane,
        at: u64,
        device: DeviceId,
        peer: PeerId,
        block: BlockId,
        offset_pages: u64,
        count: u64,
    ) -> Result<(Vec<u8>, u64)> {
        self.data_path_checks(device, peer)?;
        if count == 0 {
            return Ok((Vec::new(), at));
        }
        let units = count * self.latency.net_read;
        trace.charge_at(at, lane, ChargeKind::NetRead, units, Some(peer));
        let node = self.peer(peer)?;
        let data = node
            .read_block(block, offset_pages as usize * PAGE_SIZE, count as usize * PAGE_SIZE)?
            .to_vec();
        Ok((data, at + units))
    }

    /// Synchronous control round-trip used by the migration/eviction
    /// protocol: one net_write out plus one net_read back.
    pub fn send_control(
        &mut self,
        trace: &mut Trace,
        lane: Lane,
        at: u64,
        device: DeviceId,
        peer: PeerId,
        _message: &ControlMessage,
    ) -> Result<u64> {
        self.data_path_checks(device, peer)?;
        trace.charge_at(at, lane, ChargeKind::NetWrite, self.latency.net_write, Some(peer));
        trace.charge_at(
            at + self.latency.net_write,
            lane,
            ChargeKind::NetRead,
            self.latency.net_read,
            Some(peer),
        );
        Ok(at + self.latency.net_write + self.latency.net_read)
    }

    /// Charges the slab→block mapping cost. Returns the completion time.
    pub fn charge_map_block(&self, trace: &mut Trace, lane: Lane, at: u64, peer: PeerId) -> u64 {
        trace.charge_at(at, lane, ChargeKind::MapBlock, self.latency.map_block, Some(peer));
        at + self.latency.map_block
    }

    pub fn fail_peer(&mut self, peer: PeerId, failed: bool) -> Result<()> {
        self.peer_mut(peer)?.failed = failed;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MSG: usize = 512 * 1024;

    fn cluster(n: u32) -> Cluster {
        let peers = (0..n).map(|i| PeerNode::new(PeerId(i), 1 << 30)).collect();
        Cluster::new(LatencyModel::default(), peers)
    }

    #[test]
    fn connect_charges_once_then_free() {
        let mut c = cluster(3);
        let mut t = Trace::new();
        let lane = Lane::Drainer(DeviceId(0));
        let done = c.connect(&mut t, lane, 0, DeviceId(0), PeerId(1)).unwrap();
        assert_eq!(done, c.latency.connect);
        let again = c.connect(&mut t, lane, done, DeviceId(0), PeerId(1)).unwrap();
        assert_eq!(again, done, "second connect is free");
        assert_eq!(t.count_kind(ChargeKind::Connect), 1);
        // Unknown peer is a topology error.
        assert!(matches!(
            c.connect(&mut t, lane, 0, DeviceId(0), PeerId(99)),
            Err(SimError::UnknownPeer(_))
        ));
    }

    #[test]
    fn write_charges_message_ceiling() {
        let mut c = cluster(1);
        let mut t = Trace::new();
        let d = DeviceId(0);
        let lane = Lane::Drainer(d);
        c.connect(&mut t, lane, 0, d, PeerId(0)).unwrap();
        let block = c.peer_mut(PeerId(0)).unwrap().allocate_block(d, 2 << 20, 0).unwrap();

        // 512KB payload at 512KB message size: one message.
        let half_mb = vec![7u8; 512 * 1024];
        c.write_pages(&mut t, lane, 300, d, PeerId(0), block, 0, &half_mb, MSG).unwrap();
        assert_eq!(t.total_units(ChargeKind::NetWrite), c.latency.net_write);

        // 1MB payload: two messages.
        let one_mb = vec![9u8; 1 << 20];
        c.write_pages(&mut t, lane, 400, d, PeerId(0), block, 128, &one_mb, MSG).unwrap();
        assert_eq!(t.total_units(ChargeKind::NetWrite), 3 * c.latency.net_write);

        // Empty batch: ack with zero charge.
        let records = t.records.len();
        c.write_pages(&mut t, lane, 500, d, PeerId(0), block, 0, &[], MSG).unwrap();
        assert_eq!(t.records.len(), records);
    }

    #[test]
    fn read_your_write_at_block_level() {
        let mut c = cluster(1);
        let mut t = Trace::new();
        let d = DeviceId(0);
        let lane = Lane::Drainer(d);
        c.connect(&mut t, lane, 0, d, PeerId(0)).unwrap();
        let block = c.peer_mut(PeerId(0)).unwrap().allocate_block(d, 1 << 20, 0).unwrap();
        let payload: Vec<u8> = (0..PAGE_SIZE * 2).map(|i| (i % 251) as u8).collect();
        c.write_pages(&mut t, lane, 10, d, PeerId(0), block, 3, &payload, MSG).unwrap();
        let (back, _) = c.read_pages(&mut t, lane, 20, d, PeerId(0), block, 3, 2).unwrap();
        assert_eq!(back, payload);
        // Unwritten range within the block reads as zeros.
        let (zeros, _) = c.read_pages(&mut t, lane, 30, d, PeerId(0), block, 10, 1).unwrap();
        assert!(zeros.iter().all(|&b| b == 0));
        assert_eq!(t.total_units(ChargeKind::NetRead), 3 * c.latency.net_read);
    }

    #[test]
    fn unmapped_block_and_failed_peer_errors() {
        let mut c = cluster(2);
        let mut t = Trace::new();
        let d = DeviceId(0);
        let lane = Lane::Drainer(d);
        c.connect(&mut t, lane, 0, d, PeerId(0)).unwrap();
        let err = c.write_pages(&mut t, lane, 0, d, PeerId(0), BlockId(5), 0, &[0u8; 4096], MSG);
        assert!(matches!(err, Err(SimError::UnmappedBlock { .. })));

        c.fail_peer(PeerId(0), true).unwrap();
        let err = c.read_pages(&mut t, lane, 0, d, PeerId(0), BlockId(0), 0, 1);
        assert!(matches!(err, Err(SimError::PeerFailed(_))));

        // Not-connected peer rejects data operations.
        let err = c.read_pages(&mut t, lane, 0, d, PeerId(1), BlockId(0), 0, 1);
        assert!(matches!(err, Err(SimError::NotConnected(_))));
    }

    #[test]
    fn control_is_a_round_trip() {
        let mut c = cluster(1);
        let mut t = Trace::new();
        let d = DeviceId(0);
        c.connect(&mut t, Lane::Control, 0, d, PeerId(0)).unwrap();
        let msg = ControlMessage {
            op: crate::wire::CTRL_EVICT_REQ,
            session_id: 1,
            slab: crate::types::SlabId(0),
            src_peer: PeerId(0),
            src_block: BlockId(0),
            dst_peer: PeerId(0),
            dst_block: BlockId(0),
        };
        let done = c.send_control(&mut t, Lane::Control, 1000, d, PeerId(0), &msg).unwrap();
        assert_eq!(done, 1000 + c.latency.net_write + c.latency.net_read);
    }

    #[test]
    fn replay_yields_identical_trace() {
        let run = || {
            let mut c = cluster(2);
            let mut t = Trace::new();
            let d = DeviceId(0);
            let lane = Lane::Drainer(d);
            c.connect(&mut t, lane, 0, d, PeerId(0)).unwrap();
            c.connect(&mut t, lane, 5, d, PeerId(1)).unwrap();
            let b = c.peer_mut(PeerId(0)).unwrap().allocate_block(d, 1 << 20, 0).unwrap();
            c.write_pages(&mut t, lane, 300, d, PeerId(0), b, 0, &[1u8; 8192], MSG).unwrap();
            let _ = c.read_pages(&mut t, lane, 400, d, PeerId(0), b, 0, 2).unwrap();
            t.records
        };
        assert_eq!(run(), run());
    }
}
