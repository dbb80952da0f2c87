//! Ring reduce-scatter / all-gather engine shared by both transports.

use std::ops::Range;

use crate::error::CollectiveError;
use crate::frame::{Frame, Header, OpKind, PHASE_ALL_GATHER, PHASE_REDUCE_SCATTER};

/// One rank's view of the ring: send to the successor, receive from the
/// predecessor. Implemented by in-memory mailboxes and TCP sockets.
pub(crate) trait RingLink {
    fn successor_rank(&self) -> u32;
    fn predecessor_rank(&self) -> u32;
    fn send(&mut self, frame: Frame) -> Result<(), CollectiveError>;
    fn recv(&mut self) -> Result<Frame, CollectiveError>;
}

/// Partition `[0, n)` into `world` contiguous element ranges whose lengths
/// differ by at most one; the first `n % world` chunks take the extra element.
pub fn chunk_ranges(n: usize, world: usize) -> Vec<Range<usize>> {
    assert!(world >= 1);
    let base = n / world;
    let extra = n % world;
    let mut ranges = Vec::with_capacity(world);
    let mut start = 0;
    for c in 0..world {
        let len = base + usize::from(c < extra);
        ranges.push(start..start + len);
        start += len;
    }
    debug_assert_eq!(start, n);
    ranges
}

/// Elementwise combine rule for the reduce-scatter phase.
#[derive(Debug, Clone, Copy)]
pub(crate) enum ReduceKind {
    F64Sum,
    U8Max,
}

impl ReduceKind {
    pub(crate) fn elem_size(self) -> usize {
        match self {
            ReduceKind::F64Sum => 8,
            ReduceKind::U8Max => 1,
        }
    }

    pub(crate) fn op_kind(self) -> OpKind {
        match self {
            ReduceKind::F64Sum => OpKind::AllreduceSum,
            ReduceKind::U8Max => OpKind::AllreduceMaxU8,
        }
    }

    fn combine(self, acc: &mut [u8], incoming: &[u8]) {
        debug_assert_eq!(acc.len(), incoming.len());
        match self {
            ReduceKind::F64Sum => {
                for (a, b) in acc.chunks_exact_mut(8).zip(incoming.chunks_exact(8)) {
                    let sum = f64::from_le_bytes(a.try_into().unwrap())
                        + f64::from_le_bytes(b.try_into().unwrap());
                    a.copy_from_slice(&sum.to_le_bytes());
                }
            }
            ReduceKind::U8Max => {
                for (a, &b) in acc.iter_mut().zip(incoming) {
                    *a = (*a).max(b);
                }
            }
        }
    }
}

pub(crate) struct RingEngine<L: RingLink> {
    pub rank: u32,
    pub world: u32,
    pub group_id: u32,
    pub link: Option<L>,
}

impl<L: RingLink> RingEngine<L> {
    pub(crate) fn new(rank: u32, world: u32, group_id: u32, link: Option<L>) -> Self {
        assert_eq!(link.is_none(), world == 1, "world > 1 requires a ring link");
        RingEngine {
            rank,
            world,
            group_id,
            link,
        }
    }

    /// Receive and validate a frame against the exact expected header. Any
    /// field that disagrees — sequence number, op kind, phase, chunk index or
    /// payload length — means the peers issued mismatched collectives, and the
    /// mismatch surfaces as a protocol error instead of a corrupt reduction.
    fn recv_expected(&mut self, want: Header, elem_size: usize) -> Result<Frame, CollectiveError> {
        let link = self.link.as_mut().expect("recv on world=1 ring");
        let frame = link.recv()?;
        let got = frame.header;
        if got != want {
            if got.group_id == want.group_id
                && got.op_seq == want.op_seq
                && got.op_kind == want.op_kind
                && got.phase == want.phase
                && got.chunk_index == want.chunk_index
            {
                return Err(CollectiveError::LengthMismatch {
                    local: want.payload_len / elem_size as u64,
                    remote: got.payload_len / elem_size as u64,
                });
            }
            return Err(CollectiveError::Protocol(format!(
                "collective order mismatch: expected {want:?}, peer rank {} sent {got:?}",
                link.predecessor_rank()
            )));
        }
        if frame.payload.len() as u64 != got.payload_len {
            return Err(CollectiveError::Protocol(format!(
                "frame payload length {} disagrees with header {}",
                frame.payload.len(),
                got.payload_len
            )));
        }
        Ok(frame)
    }

    fn header(&self, op_kind: OpKind, op_seq: u64, phase: u8, chunk: usize, len: usize) -> Header {
        Header {
            group_id: self.group_id,
            op_seq,
            op_kind,
            phase,
            chunk_index: chunk as u32,
            payload_len: len as u64,
        }
    }

    /// In-place ring allreduce over `world` equally-long byte buffers:
    /// reduce-scatter then all-gather, 2(world-1) steps total.
    pub(crate) fn allreduce(
        &mut self,
        bytes: &mut [u8],
        kind: ReduceKind,
        op_seq: u64,
    ) -> Result<(), CollectiveError> {
        let world = self.world as usize;
        if world == 1 {
            return Ok(());
        }
        let elem = kind.elem_size();
        debug_assert_eq!(bytes.len() % elem, 0);
        let n = bytes.len() / elem;
        let ranges = chunk_ranges(n, world);
        let byte_range = |c: usize| ranges[c].start * elem..ranges[c].end * elem;
        let rank = self.rank as usize;

        // Reduce-scatter: after world-1 steps rank r owns the full reduction
        // of chunk (r+1) mod world.
        for step in 0..world - 1 {
            let send_chunk = (rank + world - step) % world;
            let recv_chunk = (rank + world - step - 1) % world;
            let payload = bytes[byte_range(send_chunk)].to_vec();
            let header = self.header(
                kind.op_kind(),
                op_seq,
                PHASE_REDUCE_SCATTER,
                send_chunk,
                payload.len(),
            );
            self.link
                .as_mut()
                .unwrap()
                .send(Frame { header, payload })?;
            let want = self.header(
                kind.op_kind(),
                op_seq,
                PHASE_REDUCE_SCATTER,
                recv_chunk,
                byte_range(recv_chunk).len(),
            );
            let frame = self.recv_expected(want, elem)?;
            kind.combine(&mut bytes[byte_range(recv_chunk)], &frame.payload);
        }

        // All-gather: circulate the completed chunks by copy.
        for step in 0..world - 1 {
            let send_chunk = (rank + world + 1 - step) % world;
            let recv_chunk = (rank + world - step) % world;
            let payload = bytes[byte_range(send_chunk)].to_vec();
            let header = self.header(
                kind.op_kind(),
                op_seq,
                PHASE_ALL_GATHER,
                send_chunk,
                payload.len(),
            );
            self.link
                .as_mut()
                .unwrap()
                .send(Frame { header, payload })?;
            let want = self.header(
                kind.op_kind(),
                op_seq,
                PHASE_ALL_GATHER,
                recv_chunk,
                byte_range(recv_chunk).len(),
            );
            let frame = self.recv_expected(want, elem)?;
            bytes[byte_range(recv_chunk)].copy_from_slice(&frame.payload);
        }
        Ok(())
    }

    /// Broadcast from `src`: the payload travels once around the ring, each
    /// rank forwarding to its successor until the hop before `src`.
    pub(crate) fn broadcast(
        &mut self,
        bytes: &mut [u8],
        src: u32,
        op_seq: u64,
    ) -> Result<(), CollectiveError> {
        if self.world == 1 {
            return Ok(());
        }
        if src >= self.world {
            return Err(CollectiveError::Usage(format!(
                "broadcast src rank {src} out of range for world {}",
                self.world
            )));
        }
        let header = self.header(OpKind::Broadcast, op_seq, 0, 0, bytes.len());
        if self.rank == src {
            self.link.as_mut().unwrap().send(Frame {
                header,
                payload: bytes.to_vec(),
            })?;
        } else {
            let frame = self.recv_expected(header, 8)?;
            bytes.copy_from_slice(&frame.payload);
            let succ = self.link.as_ref().unwrap().successor_rank();
            if succ != src {
                self.link.as_mut().unwrap().send(frame)?;
            }
        }
        Ok(())
    }
}
