//! Wire format and the optional socket transport backend.
//!
//! Frames are length-prefixed: u32 length (bytes after the length field),
//! u8 opcode (1=WRITE, 2=READ, 3=CTRL, 4=ACK), u64 block_id, u32 offset,
//! u32 count, payload. Little-endian throughout. The in-process transport
//! and the socket backend share this format, so a peer can be hosted in a
//! separate process without changing the engine.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::error::{Result, SimError};
use crate::types::{BlockId, PeerId, SlabId};

pub const OP_WRITE: u8 = 1;
pub const OP_READ: u8 = 2;
pub const OP_CTRL: u8 = 3;
pub const OP_ACK: u8 = 4;

/// Fixed-size header bytes after the length prefix.
const HEADER_LEN: usize = 1 + 8 + 4 + 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub opcode: u8,
    pub block_id: u64,
    pub offset: u32,
    pub count: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn ack(payload: Vec<u8>) -> Self {
        Frame { opcode: OP_ACK, block_id: 0, offset: 0, count: 0, payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        let len = (HEADER_LEN + self.payload.len()) as u32;
        let mut buf = Vec::with_capacity(4 + len as usize);
        buf.extend_from_slice(&len.to_le_bytes());
        buf.push(self.opcode);
        buf.extend_from_slice(&self.block_id.to_le_bytes());
        buf.extend_from_slice(&self.offset.to_le_bytes());
        buf.extend_from_slice(&self.count.to_le_bytes());
        buf.extend_from_slice(&self.payload);
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        if bytes.len() < HEADER_LEN {
            return Err(SimError::Wire(format!("frame too short: {} bytes", bytes.len())));
        }
        let opcode = bytes[0];
        if !(OP_WRITE..=OP_ACK).contains(&opcode) {
            return Err(SimError::Wire(format!("unknown opcode {opcode}")));
        }
        let block_id = u64::from_le_bytes(bytes[1..9].try_into().unwrap());
        let offset = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
        let count = u32::from_le_bytes(bytes[13..17].try_into().unwrap());
        Ok(Frame { opcode, block_id, offset, count, payload: bytes[HEADER_LEN..].to_vec() })
    }

    pub fn read_from(r: &mut impl Read) -> Result<Frame> {
        let mut len_buf = [0u8; 4];
        r.read_exact(&mut len_buf)?;
        let len = u32::from_le_bytes(len_buf) as usize;
        if len < HEADER_LEN {
            return Err(SimError::Wire(format!("frame length {len} below header size")));
        }
        let mut body = vec![0u8; len];
        r.read_exact(&mut body)?;
        Frame::decode(&body)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.encode())?;
        Ok(())
    }
}

/// Migration/eviction control opcodes carried in CTRL payloads.
pub const CTRL_EVICT_REQ: u8 = 1;
pub const CTRL_ALLOC_BLK: u8 = 2;
pub const CTRL_COPY_BEGIN: u8 = 3;
pub const CTRL_COPY_DONE: u8 = 4;
pub const CTRL_RELEASE_BLK: u8 = 5;
pub const CTRL_ABORT: u8 = 6;

/// One migration-protocol control message. Every variant carries the session,
/// the slab and the source/destination coordinates so receivers stay passive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlMessage {
    pub op: u8,
    pub session_id: u64,
    pub slab: SlabId,
    pub src_peer: PeerId,
    pub src_block: BlockId,
    pub dst_peer: PeerId,
    pub dst_block: BlockId,
}

impl ControlMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(1 + 8 + 8 + 4 + 8 + 4 + 8);
        buf.push(self.op);
        buf.extend_from_slice(&self.session_id.to_le_bytes());
        buf.extend_from_slice(&self.slab.0.to_le_bytes());
        buf.extend_from_slice(&self.src_peer.0.to_le_bytes());
        buf.extend_from_slice(&self.src_block.0.to_le_bytes());
        buf.extend_from_slice(&self.dst_peer.0.to_le_bytes());
        buf.extend_from_slice(&self.dst_block.0.to_le_bytes());
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<ControlMessage> {
        if bytes.len() != 41 {
            return Err(SimError::Wire(format!("control payload of {} bytes", bytes.len())));
        }
        let op = bytes[0];
        if !(CTRL_EVICT_REQ..=CTRL_ABORT).contains(&op) {
            return Err(SimError::Wire(format!("unknown control opcode {op}")));
        }
        Ok(ControlMessage {
            op,
            session_id: u64::from_le_bytes(bytes[1..9].try_into().unwrap()),
            slab: SlabId(u64::from_le_bytes(bytes[9..17].try_into().unwrap())),
            src_peer: PeerId(u32::from_le_bytes(bytes[17..21].try_into().unwrap())),
            src_block: BlockId(u64::from_le_bytes(bytes[21..29].try_into().unwrap())),
            dst_peer: PeerId(u32::from_le_bytes(bytes[29..33].try_into().unwrap())),
            dst_block: BlockId(u64::from_le_bytes(bytes[33..41].try_into().unwrap())),
        })
    }
}

/// Data-plane surface shared by the in-process peer store and the socket
/// client, so tests can drive either through the same calls.
pub trait BlockIo {
    fn write_pages(&mut self, block: BlockId, offset: u32, data: &[u8]) -> Result<()>;
    fn read_pages(&mut self, block: BlockId, offset: u32, count: u32) -> Result<Vec<u8>>;
    fn control(&mut self, msg: &ControlMessage) -> Result<Vec<u8>>;
}

/// Minimal block store backing a socket-hosted peer process.
#[derive(Debug, Default)]
pub struct SocketBlockStore {
    blocks: HashMap<u64, Vec<u8>>,
    block_bytes: usize,
    next_block: u64,
}

impl SocketBlockStore {
    pub fn new(block_bytes: usize) -> Self {
        SocketBlockStore { blocks: HashMap::new(), block_bytes, next_block: 0 }
    }

    fn ensure_block(&mut self, id: u64) -> &mut Vec<u8> {
        let bytes = self.block_bytes;
        self.blocks.entry(id).or_insert_with(|| vec![0u8; bytes])
    }

    pub fn handle(&mut self, frame: &Frame) -> Result<Frame> {
        match frame.opcode {
            OP_WRITE => {
                let page = crate::types::PAGE_SIZE;
                let off = frame.offset as usize * page;
                let block = self.ensure_block(frame.block_id);
                if off + frame.payload.len() > block.len() {
                    return Err(SimError::BlockRange {
                        offset: off as u64,
                        len: frame.payload.len() as u64,
                        block_len: block.len() as u64,
                    });
                }
                block[off..off + frame.payload.len()].copy_from_slice(&frame.payload);
                Ok(Frame::ack(Vec::new()))
            }
            OP_READ => {
                let page = crate::types::PAGE_SIZE;
                let off = frame.offset as usize * page;
                let len = frame.count as usize * page;
                let block = self.ensure_block(frame.block_id);
                if off + len > block.len() {
                    return Err(SimError::BlockRange {
                        offset: off as u64,
                        len: len as u64,
                        block_len: block.len() as u64,
                    });
                }
                Ok(Frame::ack(block[off..off + len].to_vec()))
            }
            OP_CTRL => {
                let msg = ControlMessage::decode(&frame.payload)?;
                let reply = match msg.op {
                    CTRL_ALLOC_BLK => {
                        let id = self.next_block;
                        self.next_block += 1;
                        self.ensure_block(id);
                        id.to_le_bytes().to_vec()
                    }
                    CTRL_RELEASE_BLK => {
                        self.blocks.remove(&msg.src_block.0);
                        Vec::new()
                    }
                    _ => Vec::new(),
                };
                Ok(Frame::ack(reply))
            }
            other => Err(SimError::Wire(format!("peer cannot serve opcode {other}"))),
        }
    }
}

/// TCP server hosting one peer's block store. One thread per connection; the
/// store is shared behind a mutex.
pub struct PeerServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl PeerServer {
    pub fn start(bind: &str, block_bytes: usize) -> Result<PeerServer> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let store = Arc::new(Mutex::new(SocketBlockStore::new(block_bytes)));
        let shutdown = Arc::new(AtomicBool::new(false));
        let stop = Arc::clone(&shutdown);
        let accept_thread = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { break };
                let store = Arc::clone(&store);
                std::thread::spawn(move || {
                    let _ = serve_connection(stream, store);
                });
            }
        });
        Ok(PeerServer { addr, shutdown, accept_thread: Some(accept_thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for PeerServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

fn serve_connection(mut stream: TcpStream, store: Arc<Mutex<SocketBlockStore>>) -> Result<()> {
    loop {
        let frame = match Frame::read_from(&mut stream) {
            Ok(f) => f,
            Err(SimError::Io(_)) => return Ok(()), // client hung up
            Err(e) => return Err(e),
        };
        let reply = store.lock().expect("store lock").handle(&frame)?;
        reply.write_to(&mut stream)?;
    }
}

/// Client side of the socket backend.
pub struct SocketPeer {
    stream: TcpStream,
}

impl SocketPeer {
    pub fn connect(addr: SocketAddr) -> Result<SocketPeer> {
        Ok(SocketPeer { stream: TcpStream::connect(addr)? })
    }

    fn round_trip(&mut self, frame: &Frame) -> Result<Frame> {
        frame.write_to(&mut self.stream)?;
        let reply = Frame::read_from(&mut self.stream)?;
        if reply.opcode != OP_ACK {
            return Err(SimError::Wire(format!("expected ACK, got opcode {}", reply.opcode)));
        }
        Ok(reply)
    }
}

impl BlockIo for SocketPeer {
    fn write_pages(&mut self, block: BlockId, offset: u32, data: &[u8]) -> Result<()> {
        let frame = Frame {
            opcode: OP_WRITE,
            block_id: block.0,
            offset,
            count: (data.len() / crate::types::PAGE_SIZE) as u32,
            payload: data.to_vec(),
        };
        self.round_trip(&frame)?;
        Ok(())
    }

    fn read_pages(&mut self, block: BlockId, offset: u32, count: u32) -> Result<Vec<u8>> {
        let frame = Frame { opcode: OP_READ, block_id: block.0, offset, count, payload: Vec::new() };
        Ok(self.round_trip(&frame)?.payload)
    }

    fn control(&mut self, msg: &ControlMessage) -> Result<Vec<u8>> {
        let frame = Frame {
            opcode: OP_CTRL,
            block_id: 0,
            offset: 0,
            count: 0,
            payload: msg.encode(),
        };
        Ok(self.round_trip(&frame)?.payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_layout_is_little_endian() {
        let f = Frame { opcode: OP_WRITE, block_id: 7, offset: 3, count: 2, payload: vec![0xAB; 4] };
        let bytes = f.encode();
        assert_eq!(&bytes[0..4], &21u32.to_le_bytes());
        assert_eq!(bytes[4], OP_WRITE);
        assert_eq!(&bytes[5..13], &7u64.to_le_bytes());
        assert_eq!(&bytes[13..17], &3u32.to_le_bytes());
        assert_eq!(&bytes[17..21], &2u32.to_le_bytes());
        assert_eq!(&bytes[21..], &[0xAB; 4]);
        let back = Frame::decode(&bytes[4..]).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn control_message_round_trip() {
        let msg = ControlMessage {
            op: CTRL_COPY_BEGIN,
            session_id: 42,
            slab: SlabId(9),
            src_peer: PeerId(1),
            src_block: BlockId(11),
            dst_peer: PeerId(4),
            dst_block: BlockId(12),
        };
        assert_eq!(ControlMessage::decode(&msg.encode()).unwrap(), msg);
        assert!(ControlMessage::decode(&[0u8; 5]).is_err());
    }

    #[test]
    fn rejects_bad_opcode() {
        let mut bytes = Frame::ack(vec![]).encode();
        bytes[4] = 99;
        assert!(Frame::decode(&bytes[4..]).is_err());
    }
}
