use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use bks_autograd::{backward, mse_loss, Model, Tensor};
use bks_collectives::{rendezvous, GroupConfig, LoopbackFabric, ProcessGroup};
use bks_modelzoo::{Sgd, SgdConfig, SyntheticRegression};
use bks_reducer::{DataParallel, ReducerConfig};

use crate::config::{resolve_model, RunConfig, TransportKind};
use crate::records::{write_csv, IterationRecord};

/// Fault injection for launcher tests: the rank named in this variable exits
/// with an error after its first iteration.
pub const FAULT_RANK_ENV: &str = "BKS_FAULT_RANK";

fn tcp_master_for_group(master_addr: &str, group_index: u32) -> Result<String> {
    let (host, port) = master_addr
        .rsplit_once(':')
        .ok_or_else(|| anyhow!("master address '{master_addr}' is not host:port"))?;
    let port: u16 = port.parse().context("master port")?;
    Ok(format!("{host}:{}", port + group_index as u16))
}

/// Form this rank's process group: `round_robin` inner groups composed, each
/// with its own fabric (loopback) or master port (tcp).
pub fn form_groups(
    cfg: &RunConfig,
    fabrics: Option<&[LoopbackFabric]>,
    rank: u32,
) -> Result<ProcessGroup> {
    let mut groups = Vec::with_capacity(cfg.round_robin as usize);
    for i in 0..cfg.round_robin {
        let group_cfg = match cfg.transport {
            TransportKind::Loopback => {
                let fabrics = fabrics.ok_or_else(|| {
                    anyhow!("loopback runs need fabrics shared across rank threads")
                })?;
                let mut gc = GroupConfig::loopback(fabrics[i as usize].clone(), rank, cfg.world, i);
                if let Some(model) = cfg.latency_model() {
                    gc = gc.with_latency(model);
                }
                gc
            }
            TransportKind::Tcp => GroupConfig::tcp(
                tcp_master_for_group(&cfg.master_addr, i)?,
                rank,
                cfg.world,
                i,
            ),
        };
        groups.push(rendezvous(group_cfg).with_context(|| format!("rendezvous for group {i}"))?);
    }
    if groups.len() == 1 {
        Ok(groups.pop().unwrap())
    } else {
        Ok(ProcessGroup::round_robin(groups)?)
    }
}

/// Latency-free side group used purely to line ranks up between iterations.
/// Uses the fabric (or tcp port) just past the round-robin set.
fn form_barrier_group(
    cfg: &RunConfig,
    fabrics: Option<&[LoopbackFabric]>,
    rank: u32,
) -> Result<ProcessGroup> {
    let i = cfg.round_robin;
    let group_cfg = match cfg.transport {
        TransportKind::Loopback => {
            let fabrics = fabrics
                .ok_or_else(|| anyhow!("loopback runs need fabrics shared across rank threads"))?;
            GroupConfig::loopback(fabrics[i as usize].clone(), rank, cfg.world, i)
        }
        TransportKind::Tcp => GroupConfig::tcp(
            tcp_master_for_group(&cfg.master_addr, i)?,
            rank,
            cfg.world,
            i,
        ),
    };
    rendezvous(group_cfg).context("rendezvous for the barrier group")
}

fn barrier(group: &ProcessGroup) -> Result<()> {
    group
        .allreduce_sum(vec![0.0])
        .and_then(|w| w.wait())
        .context("iteration barrier")?;
    Ok(())
}

/// All ranks must run with a consistent configuration; OR-reducing the hash
/// bytes lets every rank detect a mismatch symmetrically and abort before
/// training.
fn exchange_config_hash(group: &ProcessGroup, cfg: &RunConfig) -> Result<()> {
    let hash = cfg.config_hash();
    let local = hash.to_le_bytes().to_vec();
    let global = group
        .allreduce_max_u8(local)
        .and_then(|w| w.wait())
        .context("config-hash exchange")?;
    if global != hash.to_le_bytes() {
        bail!(
            "configuration mismatch across ranks: local hash {hash:016x}, \
             combined {:016x} — aborting before training",
            u64::from_le_bytes(global.try_into().unwrap())
        );
    }
    Ok(())
}

struct TimedPass {
    forward_s: f64,
    backward_s: f64,
    loss: f64,
}

fn one_pass(
    ddp: &mut DataParallel<Box<dyn Model>>,
    x: &Tensor,
    y: &Tensor,
) -> Result<TimedPass, bks_reducer::ReducerError> {
    let fwd_start = Instant::now();
    let out = ddp.forward(x)?;
    let loss_t = mse_loss(&out, y)?;
    let forward_s = fwd_start.elapsed().as_secs_f64();
    let loss = loss_t.item()?;
    let bwd_start = Instant::now();
    backward(&loss_t)?;
    Ok(TimedPass {
        forward_s,
        backward_s: bwd_start.elapsed().as_secs_f64(),
        loss,
    })
}

/// One rank's full experiment: group formation, config check, training loop,
/// CSV output. Loopback callers pass the shared fabrics and a rank; TCP
/// callers run one process per rank with `cfg.rank`.
pub fn run_single_rank(
    cfg: &RunConfig,
    fabrics: Option<&[LoopbackFabric]>,
    rank: u32,
) -> Result<Vec<IterationRecord>> {
    cfg.validate()?;
    let group = form_groups(cfg, fabrics, rank)?;
    let barrier_group = if cfg.iteration_barrier {
        Some(form_barrier_group(cfg, fabrics, rank)?)
    } else {
        None
    };
    exchange_config_hash(&group, cfg)?;

    let kind = resolve_model(&cfg.model)?;
    let net = kind.build(cfg.seed, rank);
    let mut ddp = DataParallel::new(
        net,
        ReducerConfig::new(group)
            .bucket_cap_bytes(cfg.reducer_cap_bytes())
            .find_unused_parameters(cfg.find_unused)
            .overlap_comm(!cfg.no_overlap),
    )?;
    let mut opt = Sgd::new(
        ddp.parameters(),
        SgdConfig::new(cfg.lr).with_momentum(cfg.momentum),
    );
    let task = SyntheticRegression::new(kind.input_dim(), kind.output_dim(), cfg.seed);
    let full_batch = cfg.batch_size * cfg.world as usize;
    let fault_rank: Option<u32> = std::env::var(FAULT_RANK_ENV)
        .ok()
        .and_then(|v| v.parse().ok());

    let mut records = Vec::with_capacity(cfg.iters as usize);
    for iteration in 0..cfg.iters {
        if let Some(bg) = &barrier_group {
            barrier(bg)?;
        }
        let iter_start = Instant::now();
        let sync = iteration % cfg.skip_sync_every == 0;
        let (x, y) = task.shard(iteration, full_batch, rank, cfg.world);
        let pass = if sync {
            one_pass(&mut ddp, &x, &y)?
        } else {
            ddp.no_sync(|m| one_pass(m, &x, &y))?
        };
        let exposed = ddp.take_exposed_comm_seconds();
        let opt_start = Instant::now();
        if sync {
            opt.step();
        }
        let optimizer_s = opt_start.elapsed().as_secs_f64();
        if !pass.loss.is_finite() {
            bail!("non-finite loss at iteration {iteration}; aborting the run");
        }
        records.push(IterationRecord {
            iteration,
            forward_s: pass.forward_s,
            backward_compute_s: (pass.backward_s - exposed).max(0.0),
            backward_comm_exposed_s: exposed,
            optimizer_s,
            total_s: iter_start.elapsed().as_secs_f64(),
            loss: pass.loss,
        });
        if fault_rank == Some(rank) && iteration >= 1 {
            bail!("injected fault on rank {rank} after iteration {iteration}");
        }
    }

    if let Some(path) = cfg.rank_out_path(rank) {
        write_csv(&path, &records)?;
    }
    Ok(records)
}

/// Spawn one thread per rank over shared loopback fabrics and collect every
/// rank's records in rank order.
pub fn run_loopback_world(cfg: &RunConfig) -> Result<Vec<Vec<IterationRecord>>> {
    if cfg.transport != TransportKind::Loopback {
        bail!("run_loopback_world requires the loopback transport");
    }
    let fabric_count = cfg.round_robin + u32::from(cfg.iteration_barrier);
    let fabrics: Vec<LoopbackFabric> = (0..fabric_count)
        .map(|_| LoopbackFabric::new(cfg.world))
        .collect();
    let results: Vec<Result<Vec<IterationRecord>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.world)
            .map(|rank| {
                let fabrics = &fabrics;
                scope.spawn(move || run_single_rank(cfg, Some(fabrics), rank))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut all = Vec::with_capacity(results.len());
    for (rank, result) in results.into_iter().enumerate() {
        all.push(result.with_context(|| format!("rank {rank} failed"))?);
    }
    Ok(all)
}

/// Entry point used by the CLI `run` command. Loopback drives every rank as
/// a thread in this process; TCP runs just this process's rank (the launcher
/// spawns the others).
pub fn run_experiment(cfg: &RunConfig) -> Result<Vec<IterationRecord>> {
    match cfg.transport {
        TransportKind::Loopback => {
            let mut all = run_loopback_world(cfg)?;
            Ok(all.swap_remove(0))
        }
        TransportKind::Tcp => run_single_rank(cfg, None, cfg.rank),
    }
}
