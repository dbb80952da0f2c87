//! Wire format shared by both transports.
//!
//! Every frame is a fixed 30-byte header followed by the payload:
//! magic "BKS1", group_id (u32 LE), op_seq (u64 LE), op_kind (u8),
//! phase (u8), chunk_index (u32 LE), payload_len_bytes (u64 LE).
//! Collective payloads are fp64 LE arrays or raw bytes for bitmaps;
//! rendezvous frames (op_kind 255) carry {rank: u32 LE, addr_len: u16 LE,
//! utf8 address}.

use crate::error::CollectiveError;

pub const FRAME_MAGIC: [u8; 4] = *b"BKS1";
pub const HEADER_LEN: usize = 30;

pub const PHASE_REDUCE_SCATTER: u8 = 0;
pub const PHASE_ALL_GATHER: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum OpKind {
    Broadcast = 0,
    AllreduceSum = 1,
    AllreduceMaxU8 = 2,
    Rendezvous = 255,
}

impl OpKind {
    pub fn from_u8(v: u8) -> Result<OpKind, CollectiveError> {
        match v {
            0 => Ok(OpKind::Broadcast),
            1 => Ok(OpKind::AllreduceSum),
            2 => Ok(OpKind::AllreduceMaxU8),
            255 => Ok(OpKind::Rendezvous),
            other => Err(CollectiveError::Protocol(format!(
                "unknown op kind {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub group_id: u32,
    pub op_seq: u64,
    pub op_kind: OpKind,
    pub phase: u8,
    pub chunk_index: u32,
    pub payload_len: u64,
}

impl Header {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut buf = [0u8; HEADER_LEN];
        buf[0..4].copy_from_slice(&FRAME_MAGIC);
        buf[4..8].copy_from_slice(&self.group_id.to_le_bytes());
        buf[8..16].copy_from_slice(&self.op_seq.to_le_bytes());
        buf[16] = self.op_kind as u8;
        buf[17] = self.phase;
        buf[18..22].copy_from_slice(&self.chunk_index.to_le_bytes());
        buf[22..30].copy_from_slice(&self.payload_len.to_le_bytes());
        buf
    }

    pub fn decode(buf: &[u8; HEADER_LEN]) -> Result<Header, CollectiveError> {
        if buf[0..4] != FRAME_MAGIC {
            return Err(CollectiveError::Protocol(format!(
                "bad frame magic {:?}",
                &buf[0..4]
            )));
        }
        Ok(Header {
            group_id: u32::from_le_bytes(buf[4..8].try_into().unwrap()),
            op_seq: u64::from_le_bytes(buf[8..16].try_into().unwrap()),
            op_kind: OpKind::from_u8(buf[16])?,
            phase: buf[17],
            chunk_index: u32::from_le_bytes(buf[18..22].try_into().unwrap()),
            payload_len: u64::from_le_bytes(buf[22..30].try_into().unwrap()),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub header: Header,
    pub payload: Vec<u8>,
}

pub fn encode_f64s(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f64s(bytes: &[u8]) -> Result<Vec<f64>, CollectiveError> {
    if !bytes.len().is_multiple_of(8) {
        return Err(CollectiveError::Protocol(format!(
            "fp64 payload length {} not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn encode_rendezvous_payload(rank: u32, addr: &str) -> Vec<u8> {
    let addr = addr.as_bytes();
    let mut out = Vec::with_capacity(6 + addr.len());
    out.extend_from_slice(&rank.to_le_bytes());
    out.extend_from_slice(&(addr.len() as u16).to_le_bytes());
    out.extend_from_slice(addr);
    out
}

pub fn decode_rendezvous_payload(payload: &[u8]) -> Result<(u32, String), CollectiveError> {
    if payload.len() < 6 {
        return Err(CollectiveError::Protocol(format!(
            "rendezvous payload too short: {} bytes",
            payload.len()
        )));
    }
    let rank = u32::from_le_bytes(payload[0..4].try_into().unwrap());
    let addr_len = u16::from_le_bytes(payload[4..6].try_into().unwrap()) as usize;
    if payload.len() != 6 + addr_len {
        return Err(CollectiveError::Protocol(format!(
            "rendezvous payload length {} does not match addr_len {addr_len}",
            payload.len()
        )));
    }
    let addr = String::from_utf8(payload[6..].to_vec())
        .map_err(|_| CollectiveError::Protocol("rendezvous address is not utf8".into()))?;
    Ok((rank, addr))
}
