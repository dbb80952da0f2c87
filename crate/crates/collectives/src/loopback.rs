//! In-process transport: per-rank mailboxes over channels, so several logical
//! ranks (threads) in one process run the same ring code path as TCP.

use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::error::CollectiveError;
use crate::frame::Frame;
use crate::ring::RingLink;

struct FabricState {
    /// Receiver ends, taken exactly once by the rank that joins; a second
    /// take is a duplicate-rank protocol error.
    receivers: Vec<Option<Receiver<Frame>>>,
    joined: u32,
    failed: bool,
}

struct FabricInner {
    world: u32,
    senders: Vec<Sender<Frame>>,
    state: Mutex<FabricState>,
    barrier: Condvar,
}

/// Shared rendezvous medium for one loopback group. Create one per group and
/// hand clones to every rank's thread.
#[derive(Clone)]
pub struct LoopbackFabric {
    inner: Arc<FabricInner>,
}

impl LoopbackFabric {
    pub fn new(world: u32) -> LoopbackFabric {
        assert!(world >= 1);
        let mut senders = Vec::with_capacity(world as usize);
        let mut receivers = Vec::with_capacity(world as usize);
        for _ in 0..world {
            let (tx, rx) = channel();
            senders.push(tx);
            receivers.push(Some(rx));
        }
        LoopbackFabric {
            inner: Arc::new(FabricInner {
                world,
                senders,
                state: Mutex::new(FabricState {
                    receivers,
                    joined: 0,
                    failed: false,
                }),
                barrier: Condvar::new(),
            }),
        }
    }

    pub fn world(&self) -> u32 {
        self.inner.world
    }

    /// Claim a rank's mailbox and block until every rank has joined — the
    /// first arrival waits for the last. Times out with a rendezvous error.
    pub(crate) fn join(
        &self,
        rank: u32,
        timeout: Duration,
    ) -> Result<LoopbackLink, CollectiveError> {
        let world = self.inner.world;
        if rank >= world {
            return Err(CollectiveError::Usage(format!(
                "rank {rank} out of range for world {world}"
            )));
        }
        let receiver = {
            let mut state = self.inner.state.lock().unwrap();
            let slot = state.receivers[rank as usize].take().ok_or_else(|| {
                CollectiveError::Protocol(format!("duplicate rank {rank} at rendezvous"))
            })?;
            state.joined += 1;
            self.inner.barrier.notify_all();
            let deadline = Instant::now() + timeout;
            while state.joined < world && !state.failed {
                let now = Instant::now();
                if now >= deadline {
                    state.failed = true;
                    self.inner.barrier.notify_all();
                    return Err(CollectiveError::RendezvousTimeout(timeout));
                }
                let (s, _) = self
                    .inner
                    .barrier
                    .wait_timeout(state, deadline - now)
                    .unwrap();
                state = s;
            }
            if state.failed {
                return Err(CollectiveError::Rendezvous(
                    "a peer rank abandoned the rendezvous".into(),
                ));
            }
            slot
        };
        let succ = (rank + 1) % world;
        let pred = (rank + world - 1) % world;
        Ok(LoopbackLink {
            succ_tx: self.inner.senders[succ as usize].clone(),
            mailbox: receiver,
            succ,
            pred,
            recv_timeout: timeout,
        })
    }
}

pub(crate) struct LoopbackLink {
    succ_tx: Sender<Frame>,
    mailbox: Receiver<Frame>,
    succ: u32,
    pred: u32,
    recv_timeout: Duration,
}

impl RingLink for LoopbackLink {
    fn successor_rank(&self) -> u32 {
        self.succ
    }

    fn predecessor_rank(&self) -> u32 {
        self.pred
    }

    fn send(&mut self, frame: Frame) -> Result<(), CollectiveError> {
        self.succ_tx
            .send(frame)
            .map_err(|_| CollectiveError::Transport {
                peer: self.succ,
                message: "peer mailbox closed".into(),
            })
    }

    fn recv(&mut self) -> Result<Frame, CollectiveError> {
        use std::sync::mpsc::RecvTimeoutError;
        self.mailbox.recv_timeout(self.recv_timeout).map_err(|e| {
            let message = match e {
                RecvTimeoutError::Timeout => format!("timed out after {:?}", self.recv_timeout),
                RecvTimeoutError::Disconnected => "peer disconnected".into(),
            };
            CollectiveError::Transport {
                peer: self.pred,
                message,
            }
        })
    }
}
