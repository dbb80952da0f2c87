use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use bks_collectives::{loopback_cost, LatencyModel, LoopbackFabric, ProcessGroup};

use crate::config::{RunConfig, TransportKind};
use crate::experiment::form_groups;

pub const MICROBENCH_CSV_HEADER: &str = "per_op_elements,total_seconds";

#[derive(Debug, Clone, Copy)]
pub struct MicrobenchRow {
    pub per_op_elements: usize,
    pub total_seconds: f64,
}

/// AllReduce a fixed total element count split into `total / per_op`
/// operations: launch all handles asynchronously, then block on them
/// together. Returns wall seconds for the whole batch of ops.
pub fn time_split_allreduce(group: &ProcessGroup, total: usize, per_op: usize) -> Result<f64> {
    if !total.is_multiple_of(per_op) {
        bail!("per-op size {per_op} must divide total {total}");
    }
    let ops = total / per_op;
    let start = Instant::now();
    let mut handles = Vec::with_capacity(ops);
    for _ in 0..ops {
        handles.push(group.allreduce_sum(vec![1.0; per_op])?);
    }
    for h in handles {
        h.wait()?;
    }
    Ok(start.elapsed().as_secs_f64())
}

/// Closed-form prediction under the alpha-beta model: each of the
/// `total/per_op` operations costs `alpha + 8*per_op/beta`.
pub fn closed_form_total(model: &LatencyModel, total: usize, per_op: usize) -> f64 {
    let ops = (total / per_op) as f64;
    ops * loopback_cost(model, per_op * 8)
}

/// Measure this rank's microbench rows. Loopback callers drive all ranks as
/// threads via [`run_microbench`]; TCP callers run one process per rank.
pub fn microbench_rank(
    cfg: &RunConfig,
    fabrics: Option<&[LoopbackFabric]>,
    rank: u32,
    total: usize,
    sizes: &[usize],
) -> Result<Vec<MicrobenchRow>> {
    let group = form_groups(cfg, fabrics, rank)?;
    let mut rows = Vec::with_capacity(sizes.len());
    for &per_op in sizes {
        rows.push(MicrobenchRow {
            per_op_elements: per_op,
            total_seconds: time_split_allreduce(&group, total, per_op)?,
        });
    }
    Ok(rows)
}

/// Run the microbench across the whole world and return rank 0's rows.
pub fn run_microbench(
    cfg: &RunConfig,
    total: usize,
    sizes: &[usize],
) -> Result<Vec<MicrobenchRow>> {
    for &s in sizes {
        if s == 0 || !total.is_multiple_of(s) {
            bail!("per-op sizes must be positive divisors of the total ({total}), got {s}");
        }
    }
    match cfg.transport {
        TransportKind::Loopback => {
            let fabrics: Vec<LoopbackFabric> = (0..cfg.round_robin)
                .map(|_| LoopbackFabric::new(cfg.world))
                .collect();
            let results: Vec<Result<Vec<MicrobenchRow>>> = std::thread::scope(|scope| {
                let handles: Vec<_> = (0..cfg.world)
                    .map(|rank| {
                        let fabrics = &fabrics;
                        scope.spawn(move || microbench_rank(cfg, Some(fabrics), rank, total, sizes))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            });
            let mut rank0 = None;
            for (rank, result) in results.into_iter().enumerate() {
                let rows = result.with_context(|| format!("rank {rank} failed"))?;
                if rank == 0 {
                    rank0 = Some(rows);
                }
            }
            Ok(rank0.unwrap())
        }
        TransportKind::Tcp => microbench_rank(cfg, None, cfg.rank, total, sizes),
    }
}

pub fn write_microbench_csv(path: &Path, rows: &[MicrobenchRow]) -> Result<()> {
    let mut text = String::from(MICROBENCH_CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!("{},{}\n", r.per_op_elements, r.total_seconds));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .with_context(|| format!("bad per-op size '{v}'"))
        })
        .collect()
}
