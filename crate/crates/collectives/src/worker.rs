//! Per-group background progress worker. Commands are executed strictly in
//! issue order, so handles for one group complete in issue order too.

use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::mpsc::{Receiver, SyncSender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::cost::{loopback_cost, LatencyModel};
use crate::error::CollectiveError;
use crate::frame::{decode_f64s, encode_f64s};
use crate::ring::{ReduceKind, RingEngine, RingLink};

pub(crate) const STATE_PENDING: u8 = 0;
pub(crate) const STATE_DONE: u8 = 1;
pub(crate) const STATE_FAILED: u8 = 2;

/// Per-op timing trace for debugging stalls; set BKS_TRACE_WORKER=1.
fn trace_enabled() -> bool {
    static ON: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
    *ON.get_or_init(|| std::env::var_os("BKS_TRACE_WORKER").is_some())
}

#[derive(Debug)]
pub(crate) enum Payload {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl Payload {
    fn nbytes(&self) -> usize {
        match self {
            Payload::F64(v) => v.len() * 8,
            Payload::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum CommandKind {
    Broadcast { src: u32 },
    AllreduceSum,
    AllreduceMaxU8,
}

pub(crate) struct Command {
    pub kind: CommandKind,
    pub payload: Payload,
    pub seq: u64,
    pub issued_at: Instant,
    pub reply: SyncSender<Result<Payload, CollectiveError>>,
    pub state: Arc<AtomicU8>,
    /// Simulated completion time in nanoseconds after the group epoch; the
    /// waiter sleeps out the remainder. Zero when no latency model applies.
    pub deadline_nanos: Arc<AtomicU64>,
}

pub(crate) struct WorkerConfig {
    pub latency: Option<LatencyModel>,
    /// Simulated-delay pacing only applies to loopback transports.
    pub simulate_latency: bool,
    /// Time base shared with every handle of this group.
    pub epoch: Instant,
}

fn execute<L: RingLink>(
    engine: &mut RingEngine<L>,
    kind: CommandKind,
    payload: Payload,
    seq: u64,
) -> Result<Payload, CollectiveError> {
    if engine.world == 1 {
        // Single-rank collectives are identities; no wire, no delay.
        if let CommandKind::Broadcast { src } = kind {
            if src >= 1 {
                return Err(CollectiveError::Usage(format!(
                    "broadcast src rank {src} out of range for world 1"
                )));
            }
        }
        return Ok(payload);
    }
    match (kind, payload) {
        (CommandKind::Broadcast { src }, Payload::F64(values)) => {
            let mut bytes = encode_f64s(&values);
            engine.broadcast(&mut bytes, src, seq)?;
            Ok(Payload::F64(decode_f64s(&bytes)?))
        }
        (CommandKind::AllreduceSum, Payload::F64(values)) => {
            let mut bytes = encode_f64s(&values);
            engine.allreduce(&mut bytes, ReduceKind::F64Sum, seq)?;
            Ok(Payload::F64(decode_f64s(&bytes)?))
        }
        (CommandKind::AllreduceMaxU8, Payload::U8(mut bytes)) => {
            engine.allreduce(&mut bytes, ReduceKind::U8Max, seq)?;
            Ok(Payload::U8(bytes))
        }
        (kind, payload) => Err(CollectiveError::Usage(format!(
            "payload type does not match op {kind:?}: {payload:?}"
        ))),
    }
}

pub(crate) fn run_worker<L: RingLink>(
    mut engine: RingEngine<L>,
    commands: Receiver<Command>,
    cfg: WorkerConfig,
) {
    let mut poisoned: Option<String> = None;
    // The simulated link serves one op at a time: an op occupies it from
    // max(issue time, link free) for cost seconds. Chaining from issue times
    // keeps the simulated schedule independent of when this thread actually
    // gets CPU to move the bytes.
    let mut link_free_at = cfg.epoch;
    while let Ok(cmd) = commands.recv() {
        if let Some(why) = &poisoned {
            cmd.state.store(STATE_FAILED, Ordering::SeqCst);
            let _ = cmd.reply.send(Err(CollectiveError::Protocol(format!(
                "group poisoned by earlier failure: {why}"
            ))));
            continue;
        }
        let nbytes = cmd.payload.nbytes();
        let t_start = Instant::now();
        let result = execute(&mut engine, cmd.kind, cmd.payload, cmd.seq);
        if trace_enabled() {
            eprintln!(
                "[worker g{} r{}] seq {} recv_at {:.1}ms exchange {:.2}ms",
                engine.group_id,
                engine.rank,
                cmd.seq,
                (t_start - cfg.epoch).as_secs_f64() * 1e3,
                t_start.elapsed().as_secs_f64() * 1e3
            );
        }
        match &result {
            Ok(_) => {
                if cfg.simulate_latency && engine.world > 1 {
                    if let Some(model) = &cfg.latency {
                        let cost = Duration::from_secs_f64(loopback_cost(model, nbytes));
                        link_free_at = link_free_at.max(cmd.issued_at) + cost;
                        cmd.deadline_nanos.store(
                            (link_free_at - cfg.epoch).as_nanos() as u64,
                            Ordering::SeqCst,
                        );
                    }
                }
                cmd.state.store(STATE_DONE, Ordering::SeqCst);
            }
            Err(e) => {
                poisoned = Some(e.to_string());
                cmd.state.store(STATE_FAILED, Ordering::SeqCst);
            }
        }
        let _ = cmd.reply.send(result);
    }
}
