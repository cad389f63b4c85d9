//! Sender-driven migration protocol.
//!
//! The pressured peer only reports; the sender owning the victim block runs
//! every step: it holds drains to the slab, picks a destination by
//! power-of-two choices, has the source stream the block to the destination
//! in message-size chunks, remaps the slab, lets the held writes drain to
//! the new block, and finally releases the source block. Reads of the slab
//! keep hitting the source block until the remap lands; writes complete
//! locally throughout and wait in the staging queue.
//!
//! Control round-trips per session: EVICT_REQ, ALLOC_BLK, COPY_BEGIN,
//! COPY_DONE, RELEASE_BLK — a fixed count independent of the slab size.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SimError};
use crate::latency::{ChargeKind, Lane, Trace};
use crate::sender::Device;
use crate::transport::Cluster;
use crate::types::{div_ceil, BlockId, DeviceId, PeerId, SlabId};
use crate::wire::{
    ControlMessage, CTRL_ALLOC_BLK, CTRL_COPY_BEGIN, CTRL_COPY_DONE, CTRL_EVICT_REQ,
    CTRL_RELEASE_BLK,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Requested,
    DestinationChosen,
    Copying,
    Remapped,
    Flushed,
    Done,
    Aborted,
}

#[derive(Debug)]
pub struct MigrationSession {
    pub id: u64,
    pub device: DeviceId,
    pub slab: SlabId,
    /// Which location of the slab is moving (primary or a replica).
    pub loc_index: usize,
    pub source: (PeerId, BlockId),
    pub dest: Option<(PeerId, BlockId)>,
    pub state: SessionState,
    /// Time of the next protocol step; None while waiting on the drainer.
    pub next_at: Option<u64>,
    /// Staged entries targeting the slab at remap time; the session is
    /// flushed once they have all drained to the new destination.
    pub held_seqs: BTreeSet<u64>,
    /// Writes that arrived for the slab while it was held.
    pub held_write_count: u64,
    pub control_messages: u32,
    pub restarts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Progress,
    Done,
    Aborted,
}

impl MigrationSession {
    /// Builds the session for an eviction report arriving from the source
    /// peer. `at` is the tick time on the peer; the request lands at the
    /// sender one control round-trip later.
    pub fn request(
        id: u64,
        device: DeviceId,
        slab: SlabId,
        loc_index: usize,
        source: (PeerId, BlockId),
        cluster: &mut Cluster,
        trace: &mut Trace,
        at: u64,
    ) -> Result<MigrationSession> {
        let lane = Lane::Migration(id);
        let msg = ControlMessage {
            op: CTRL_EVICT_REQ,
            session_id: id,
            slab,
            src_peer: source.0,
            src_block: source.1,
            dst_peer: source.0,
            dst_block: source.1,
        };
        // The report travels peer → sender over the established pair.
        let arrived = cluster.send_control(trace, lane, at, device, source.0, &msg)?;
        Ok(MigrationSession {
            id,
            device,
            slab,
            loc_index,
            source,
            dest: None,
            state: SessionState::Requested,
            next_at: Some(arrived),
            held_seqs: BTreeSet::new(),
            held_write_count: 0,
            control_messages: 1,
            restarts: 0,
        })
    }

    pub fn is_active(&self) -> bool {
        !matches!(self.state, SessionState::Done | SessionState::Aborted)
    }

    pub fn lane(&self) -> Lane {
        Lane::Migration(self.id)
    }
}

/// Picks a destination peer (alive, enough free memory, not the source, not
/// already holding a location of the slab) and allocates a block there.
/// Returns the completion time.
fn choose_and_alloc_destination(
    session: &mut MigrationSession,
    device: &mut Device,
    cluster: &mut Cluster,
    trace: &mut Trace,
    rng: &mut ChaCha8Rng,
    at: u64,
) -> Result<u64> {
    let slab_bytes = device.cfg.slab_bytes();
    let holders = device.slabs.peers_of(session.slab);
    let candidates: Vec<(PeerId, u64)> = cluster
        .peers
        .iter()
        .filter(|p| {
            !p.failed
                && p.id != session.source.0
                && !holders.contains(&p.id)
                && p.free_bytes() >= slab_bytes
        })
        .map(|p| (p.id, p.free_bytes()))
        .collect();
    let dst = device.slabs.choose_peer(device.cfg.placement, rng, &candidates)?;

    let lane = session.lane();
    let t = cluster.connect(trace, lane, at, session.device, dst)?;
    let msg = ControlMessage {
        op: CTRL_ALLOC_BLK,
        session_id: session.id,
        slab: session.slab,
        src_peer: session.source.0,
        src_block: session.source.1,
        dst_peer: dst,
        dst_block: BlockId(0),
    };
    let t = cluster.send_control(trace, lane, t, session.device, dst, &msg)?;
    session.control_messages += 1;
    let block = cluster.peer_mut(dst)?.allocate_block(session.device, slab_bytes, t)?;
    let t = cluster.charge_map_block(trace, lane, t, dst);
    session.dest = Some((dst, block));
    Ok(t)
}

/// Aborts the session, falling back to delete semantics on the source block
/// so the pressured peer still gets its memory back. Durability then rests
/// on replicas and the disk sink per the fault policy.
fn abort(
    session: &mut MigrationSession,
    device: &mut Device,
    cluster: &mut Cluster,
) -> Result<()> {
    if let Ok(peer) = cluster.peer_mut(session.source.0) {
        let _ = peer.delete_block(session.source.1);
        peer.evicting = false;
    }
    if let Some(mapping) = device.slabs.mapping_mut(session.slab) {
        mapping.locations[session.loc_index].valid = false;
    }
    device.rebuild_remote_ready(session.slab);
    device.held.remove(&session.slab);
    session.state = SessionState::Aborted;
    session.next_at = None;
    Ok(())
}

/// Advances the session at its scheduled time. The simulator calls this
/// from the pump whenever `next_at` comes due.
pub fn step(
    session: &mut MigrationSession,
    device: &mut Device,
    cluster: &mut Cluster,
    trace: &mut Trace,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let at = session.next_at.expect("step called without a scheduled time");
    match session.state {
        SessionState::Requested => {
            // Pause drains targeting the slab; new writes pile up in staging.
            device.held.insert(session.slab);
            match choose_and_alloc_destination(session, device, cluster, trace, rng, at) {
                Ok(t) => {
                    session.state = SessionState::DestinationChosen;
                    session.next_at = Some(t);
                    Ok(StepOutcome::Progress)
                }
                Err(SimError::Capacity { .. }) | Err(SimError::AllocationRefused { .. }) => {
                    abort(session, device, cluster)?;
                    Ok(StepOutcome::Aborted)
                }
                Err(e) => Err(e),
            }
        }
        SessionState::DestinationChosen => {
            let (dst_peer, _) = session.dest.expect("destination chosen");
            if cluster.peer(dst_peer)?.failed {
                return restart_destination(session, device, cluster, trace, rng, at);
            }
            if cluster.peer(session.source.0)?.failed {
                abort(session, device, cluster)?;
                return Ok(StepOutcome::Aborted);
            }
            let lane = session.lane();
            let msg = ControlMessage {
                op: CTRL_COPY_BEGIN,
                session_id: session.id,
                slab: session.slab,
                src_peer: session.source.0,
                src_block: session.source.1,
                dst_peer,
                dst_block: session.dest.unwrap().1,
            };
            let t = cluster.send_control(trace, lane, at, session.device, session.source.0, &msg)?;
            session.control_messages += 1;
            // Source streams the block to the destination in message-size
            // chunks; the sender stays off the data path.
            let slab_bytes = device.cfg.slab_bytes();
            let chunks = div_ceil(slab_bytes, device.cfg.message_bytes as u64);
            let copy_units = chunks * cluster.latency.net_write;
            trace.charge_at(t, lane, ChargeKind::NetWrite, copy_units, Some(dst_peer));
            let t = t + copy_units;
            let msg = ControlMessage { op: CTRL_COPY_DONE, ..msg };
            let t = cluster.send_control(trace, lane, t, session.device, session.source.0, &msg)?;
            session.control_messages += 1;
            session.state = SessionState::Copying;
            session.next_at = Some(t);
            Ok(StepOutcome::Progress)
        }
        SessionState::Copying => {
            let (dst_peer, dst_block) = session.dest.expect("destination chosen");
            if cluster.peer(dst_peer)?.failed {
                return restart_destination(session, device, cluster, trace, rng, at);
            }
            // Copy completes: install the source's bytes at the destination
            // and swap the mapping. Reads were served from the source block
            // for the whole copy window.
            let data = cluster.peer(session.source.0)?.block(session.source.1)?.data().to_vec();
            cluster.peer_mut(dst_peer)?.install_block_data(dst_block, &data, at)?;
            device.slabs.remap_slab(session.slab, session.loc_index, dst_peer, dst_block)?;
            device.held.remove(&session.slab);
            session.held_seqs = device
                .staging
                .iter()
                .filter(|e| e.slab == session.slab)
                .map(|e| e.seq)
                .collect();
            session.state = SessionState::Remapped;
            // With held entries pending, the drainer wakes the session as
            // they flush; otherwise it proceeds immediately.
            session.next_at = if session.held_seqs.is_empty() { Some(at) } else { None };
            Ok(StepOutcome::Progress)
        }
        SessionState::Flushed => {
            let lane = session.lane();
            let msg = ControlMessage {
                op: CTRL_RELEASE_BLK,
                session_id: session.id,
                slab: session.slab,
                src_peer: session.source.0,
                src_block: session.source.1,
                dst_peer: session.dest.unwrap().0,
                dst_block: session.dest.unwrap().1,
            };
            let _t = cluster.send_control(trace, lane, at, session.device, session.source.0, &msg)?;
            session.control_messages += 1;
            let src = cluster.peer_mut(session.source.0)?;
            let _ = src.delete_block(session.source.1);
            src.evicting = false;
            session.state = SessionState::Done;
            session.next_at = None;
            Ok(StepOutcome::Done)
        }
        SessionState::Remapped => {
            // Reached once the held entries have drained to the new block.
            session.state = SessionState::Flushed;
            session.next_at = Some(at);
            Ok(StepOutcome::Progress)
        }
        SessionState::Done | SessionState::Aborted => {
            session.next_at = None;
            Ok(StepOutcome::Progress)
        }
    }
}

/// Destination failed mid-copy: pick a new destination and restart the copy.
/// The source block is intact throughout.
fn restart_destination(
    session: &mut MigrationSession,
    device: &mut Device,
    cluster: &mut Cluster,
    trace: &mut Trace,
    rng: &mut ChaCha8Rng,
    at: u64,
) -> Result<StepOutcome> {
    session.restarts += 1;
    session.dest = None;
    match choose_and_alloc_destination(session, device, cluster, trace, rng, at) {
        Ok(t) => {
            session.state = SessionState::DestinationChosen;
            session.next_at = Some(t);
            Ok(StepOutcome::Progress)
        }
        Err(SimError::Capacity { .. }) | Err(SimError::AllocationRefused { .. }) => {
            abort(session, device, cluster)?;
            Ok(StepOutcome::Aborted)
        }
        Err(e) => Err(e),
    }
}

/// Called by the simulator when drained sequence numbers retire; wakes the
/// session once its held snapshot is flushed.
pub fn note_drained(session: &mut MigrationSession, seqs: &[u64], at: u64) {
    if session.state != SessionState::Remapped {
        return;
    }
    for s in seqs {
        session.held_seqs.remove(s);
    }
    if session.held_seqs.is_empty() && session.next_at.is_none() {
        session.next_at = Some(at);
    }
}
