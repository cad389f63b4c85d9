//! Error types for the engine and simulator.

use thiserror::Error;

use crate::types::{BlockId, PageAddr, PeerId, SlabId};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown peer {0} in cluster topology")]
    UnknownPeer(PeerId),

    #[error("peer {0} is not connected")]
    NotConnected(PeerId),

    #[error("peer {0} has failed")]
    PeerFailed(PeerId),

    #[error("block {block} not mapped on peer {peer}")]
    UnmappedBlock { peer: PeerId, block: BlockId },

    #[error("range [{offset}, {offset}+{len}) outside block of {block_len} bytes")]
    BlockRange { offset: u64, len: u64, block_len: u64 },

    #[error("address {addr} outside device space of {space_pages} pages")]
    AddressRange { addr: PageAddr, space_pages: u64 },

    #[error("request of {len} bytes exceeds block I/O limit of {limit} bytes")]
    RequestTooLarge { len: usize, limit: usize },

    #[error("request length {len} is not a multiple of the page size")]
    UnalignedLength { len: usize },

    #[error("memory pool exhausted: no free or reclaimable pages and growth is capped")]
    PoolExhausted,

    #[error("not enough peers with free capacity: need {need}, have {have}")]
    Capacity { need: usize, have: usize },

    #[error("peer {peer} cannot allocate a block of {bytes} bytes")]
    AllocationRefused { peer: PeerId, bytes: u64 },

    #[error("slab {0} already has an active migration session")]
    SessionActive(SlabId),

    #[error("data loss: page {0} has no surviving copy in memory, remote or disk")]
    DataLoss(PageAddr),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("wire protocol error: {0}")]
    Wire(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;
