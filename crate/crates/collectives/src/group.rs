use std::marker::PhantomData;
use std::sync::atomic::{AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::cost::LatencyModel;
use crate::error::CollectiveError;
use crate::loopback::LoopbackFabric;
use crate::ring::RingEngine;
use crate::tcp;
use crate::worker::{
    run_worker, Command, CommandKind, Payload, WorkerConfig, STATE_DONE, STATE_FAILED,
};

pub const DEFAULT_RENDEZVOUS_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone)]
pub enum Transport {
    /// In-process mailboxes; all ranks share one fabric handle.
    Loopback(LoopbackFabric),
    /// Real sockets; rank 0 hosts the rendezvous at `master_addr`.
    Tcp { master_addr: String },
}

#[derive(Clone)]
pub struct GroupConfig {
    pub rank: u32,
    pub world: u32,
    pub group_id: u32,
    pub transport: Transport,
    pub latency_model: Option<LatencyModel>,
    pub timeout: Duration,
}

impl GroupConfig {
    pub fn loopback(fabric: LoopbackFabric, rank: u32, world: u32, group_id: u32) -> GroupConfig {
        GroupConfig {
            rank,
            world,
            group_id,
            transport: Transport::Loopback(fabric),
            latency_model: None,
            timeout: DEFAULT_RENDEZVOUS_TIMEOUT,
        }
    }

    pub fn tcp(
        master_addr: impl Into<String>,
        rank: u32,
        world: u32,
        group_id: u32,
    ) -> GroupConfig {
        GroupConfig {
            rank,
            world,
            group_id,
            transport: Transport::Tcp {
                master_addr: master_addr.into(),
            },
            latency_model: None,
            timeout: DEFAULT_RENDEZVOUS_TIMEOUT,
        }
    }

    /// One shared fabric, one config per rank — convenience for spawning a
    /// loopback world of threads.
    pub fn loopback_world(world: u32, group_id: u32) -> Vec<GroupConfig> {
        let fabric = LoopbackFabric::new(world);
        (0..world)
            .map(|rank| GroupConfig::loopback(fabric.clone(), rank, world, group_id))
            .collect()
    }

    pub fn with_latency(mut self, model: LatencyModel) -> GroupConfig {
        self.latency_model = Some(model);
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> GroupConfig {
        self.timeout = timeout;
        self
    }
}

/// Asynchronous collective in flight. The buffer moves into the group when
/// the collective is issued and moves back out of `wait`, holding the result.
/// Handles for one group complete in issue order; only the issuing thread may
/// wait on them.
pub struct Work<T> {
    seq: u64,
    group_id: u32,
    state: Arc<AtomicU8>,
    /// Simulated completion time (nanos after the group epoch); waiters
    /// sleep out the remainder so a latency model paces the caller, never
    /// the progress worker.
    deadline_nanos: Arc<AtomicU64>,
    epoch: Instant,
    rx: Receiver<Result<Payload, CollectiveError>>,
    peer_hint: u32,
    _result: PhantomData<T>,
}

mod sealed {
    use super::{CollectiveError, Payload};

    pub trait FromPayload: Sized {
        fn from_payload(p: Payload) -> Result<Self, CollectiveError>;
    }

    impl FromPayload for Vec<f64> {
        fn from_payload(p: Payload) -> Result<Self, CollectiveError> {
            match p {
                Payload::F64(v) => Ok(v),
                Payload::U8(_) => Err(CollectiveError::Usage("expected fp64 payload".into())),
            }
        }
    }

    impl FromPayload for Vec<u8> {
        fn from_payload(p: Payload) -> Result<Self, CollectiveError> {
            match p {
                Payload::U8(v) => Ok(v),
                Payload::F64(_) => Err(CollectiveError::Usage("expected byte payload".into())),
            }
        }
    }
}

use sealed::FromPayload;

impl<T> Work<T> {
    pub fn is_done(&self) -> bool {
        self.state.load(Ordering::SeqCst) == STATE_DONE && self.deadline_passed()
    }

    fn deadline_passed(&self) -> bool {
        let nanos = self.deadline_nanos.load(Ordering::SeqCst);
        nanos == 0 || self.epoch.elapsed() >= Duration::from_nanos(nanos)
    }

    fn sleep_out_deadline(&self) {
        let nanos = self.deadline_nanos.load(Ordering::SeqCst);
        if nanos == 0 {
            return;
        }
        let target = Duration::from_nanos(nanos);
        let elapsed = self.epoch.elapsed();
        if elapsed < target {
            thread::sleep(target - elapsed);
        }
    }

    pub fn is_failed(&self) -> bool {
        self.state.load(Ordering::SeqCst) == STATE_FAILED
    }

    /// Issue-order sequence number within the group that executed the op.
    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn group_id(&self) -> u32 {
        self.group_id
    }

    fn wait_payload(self) -> Result<Payload, CollectiveError> {
        let result = match self.rx.recv() {
            Ok(result) => result,
            Err(_) => Err(CollectiveError::Transport {
                peer: self.peer_hint,
                message: "progress worker terminated before completing the op".into(),
            }),
        };
        if result.is_ok() {
            self.sleep_out_deadline();
        }
        result
    }
}

impl Work<Vec<f64>> {
    /// Block until the collective completes and take the result buffer.
    pub fn wait(self) -> Result<Vec<f64>, CollectiveError> {
        self.wait_payload().and_then(Vec::<f64>::from_payload)
    }
}

impl Work<Vec<u8>> {
    /// Block until the collective completes and take the result buffer.
    pub fn wait(self) -> Result<Vec<u8>, CollectiveError> {
        self.wait_payload().and_then(Vec::<u8>::from_payload)
    }
}

struct GroupCore {
    rank: u32,
    world: u32,
    group_id: u32,
    next_seq: AtomicU64,
    cmd_tx: Sender<Command>,
    epoch: Instant,
}

#[derive(Clone)]
enum PgInner {
    Single(Arc<GroupCore>),
    RoundRobin(Arc<RoundRobinState>),
}

struct RoundRobinState {
    groups: Vec<ProcessGroup>,
    next: AtomicUsize,
}

/// Ordered collective endpoint identified by (rank, world size). Clones share
/// the same underlying group; drive a group from a single issuing thread.
#[derive(Clone)]
pub struct ProcessGroup {
    inner: PgInner,
}

/// Form the group: blocks until every rank of the configured world has
/// arrived (rendezvous), wires the ring transport, and starts the group's
/// progress worker.
pub fn rendezvous(cfg: GroupConfig) -> Result<ProcessGroup, CollectiveError> {
    if cfg.world == 0 || cfg.rank >= cfg.world {
        return Err(CollectiveError::Usage(format!(
            "rank {} out of range for world {}",
            cfg.rank, cfg.world
        )));
    }
    let (cmd_tx, cmd_rx) = std::sync::mpsc::channel::<Command>();
    let epoch = Instant::now();
    let worker_cfg_base = |simulate: bool| WorkerConfig {
        latency: cfg.latency_model,
        simulate_latency: simulate,
        epoch,
    };
    match &cfg.transport {
        Transport::Loopback(fabric) => {
            if fabric.world() != cfg.world {
                return Err(CollectiveError::Usage(format!(
                    "fabric world {} != configured world {}",
                    fabric.world(),
                    cfg.world
                )));
            }
            let link = if cfg.world > 1 {
                Some(fabric.join(cfg.rank, cfg.timeout)?)
            } else {
                fabric.join(cfg.rank, cfg.timeout)?;
                None
            };
            let engine = RingEngine::new(cfg.rank, cfg.world, cfg.group_id, link);
            spawn_worker(engine, cmd_rx, worker_cfg_base(true), cfg.group_id);
        }
        Transport::Tcp { master_addr } => {
            let link = tcp::connect_ring(&cfg, master_addr)?;
            let link = (cfg.world > 1).then_some(link);
            let engine = RingEngine::new(cfg.rank, cfg.world, cfg.group_id, link);
            spawn_worker(engine, cmd_rx, worker_cfg_base(false), cfg.group_id);
        }
    }
    Ok(ProcessGroup {
        inner: PgInner::Single(Arc::new(GroupCore {
            rank: cfg.rank,
            world: cfg.world,
            group_id: cfg.group_id,
            next_seq: AtomicU64::new(0),
            cmd_tx,
            epoch,
        })),
    })
}

fn spawn_worker<L: crate::ring::RingLink + Send + 'static>(
    engine: RingEngine<L>,
    cmd_rx: Receiver<Command>,
    cfg: WorkerConfig,
    group_id: u32,
) {
    thread::Builder::new()
        .name(format!("bks-group-{group_id}"))
        .spawn(move || run_worker(engine, cmd_rx, cfg))
        .expect("spawn group progress worker");
}

impl GroupCore {
    fn issue<T>(
        &self,
        kind: CommandKind,
        payload: Payload,
        peer_hint: u32,
    ) -> Result<Work<T>, CollectiveError> {
        let seq = self.next_seq.fetch_add(1, Ordering::SeqCst);
        let (reply, rx) = sync_channel(1);
        let state = Arc::new(AtomicU8::new(crate::worker::STATE_PENDING));
        let deadline_nanos = Arc::new(AtomicU64::new(0));
        self.cmd_tx
            .send(Command {
                kind,
                payload,
                seq,
                issued_at: Instant::now(),
                reply,
                state: Arc::clone(&state),
                deadline_nanos: Arc::clone(&deadline_nanos),
            })
            .map_err(|_| CollectiveError::Transport {
                peer: peer_hint,
                message: "progress worker is gone".into(),
            })?;
        Ok(Work {
            seq,
            group_id: self.group_id,
            state,
            deadline_nanos,
            epoch: self.epoch,
            rx,
            peer_hint,
            _result: PhantomData,
        })
    }
}

impl ProcessGroup {
    pub fn rank(&self) -> u32 {
        match &self.inner {
            PgInner::Single(core) => core.rank,
            PgInner::RoundRobin(rr) => rr.groups[0].rank(),
        }
    }

    pub fn world(&self) -> u32 {
        match &self.inner {
            PgInner::Single(core) => core.world,
            PgInner::RoundRobin(rr) => rr.groups[0].world(),
        }
    }

    fn dispatch(&self) -> &ProcessGroup {
        match &self.inner {
            PgInner::Single(_) => self,
            PgInner::RoundRobin(rr) => {
                let k = rr.next.fetch_add(1, Ordering::SeqCst);
                &rr.groups[k % rr.groups.len()]
            }
        }
    }

    fn single(&self) -> &Arc<GroupCore> {
        match &self.dispatch().inner {
            PgInner::Single(core) => core,
            PgInner::RoundRobin(_) => unreachable!("round-robin groups cannot nest"),
        }
    }

    /// After `wait`, every rank's buffer equals `src`'s original contents.
    pub fn broadcast(&self, data: Vec<f64>, src: u32) -> Result<Work<Vec<f64>>, CollectiveError> {
        let core = self.single();
        if src >= core.world {
            return Err(CollectiveError::Usage(format!(
                "broadcast src rank {src} out of range for world {}",
                core.world
            )));
        }
        core.issue(CommandKind::Broadcast { src }, Payload::F64(data), src)
    }

    /// After `wait`, every rank holds the elementwise sum of all ranks'
    /// equally-long inputs; reduce-scatter then all-gather over the ring.
    pub fn allreduce_sum(&self, data: Vec<f64>) -> Result<Work<Vec<f64>>, CollectiveError> {
        let core = self.single();
        core.issue(CommandKind::AllreduceSum, Payload::F64(data), core.rank)
    }

    /// Elementwise maximum over byte vectors — logical OR for 0/1 bitmaps.
    /// Kept separate from the fp64 path because the element types differ.
    pub fn allreduce_max_u8(&self, data: Vec<u8>) -> Result<Work<Vec<u8>>, CollectiveError> {
        let core = self.single();
        core.issue(CommandKind::AllreduceMaxU8, Payload::U8(data), core.rank)
    }

    /// Composite group dispatching collective k to inner group k mod N.
    /// Per-inner-group ordering is preserved and handle semantics are
    /// unchanged; with one inner group this is behaviorally the inner group.
    pub fn round_robin(groups: Vec<ProcessGroup>) -> Result<ProcessGroup, CollectiveError> {
        if groups.is_empty() {
            return Err(CollectiveError::Usage(
                "round-robin needs at least one inner group".into(),
            ));
        }
        let (rank, world) = (groups[0].rank(), groups[0].world());
        for g in &groups {
            if matches!(g.inner, PgInner::RoundRobin(_)) {
                return Err(CollectiveError::Usage(
                    "round-robin groups cannot nest".into(),
                ));
            }
            if g.rank() != rank || g.world() != world {
                return Err(CollectiveError::Usage(format!(
                    "inner groups disagree on (rank, world): ({rank}, {world}) vs ({}, {})",
                    g.rank(),
                    g.world()
                )));
            }
        }
        Ok(ProcessGroup {
            inner: PgInner::RoundRobin(Arc::new(RoundRobinState {
                groups,
                next: AtomicUsize::new(0),
            })),
        })
    }
}
