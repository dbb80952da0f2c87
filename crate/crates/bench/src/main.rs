use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use bks_bench::config::{RunConfig, TransportKind};
use bks_bench::convergence::{convergence_experiment, parse_n_values, write_convergence_csv};
use bks_bench::experiment::run_experiment;
use bks_bench::launcher::{launch_local_world, strip_launcher_args};
use bks_bench::microbench::{parse_sizes, run_microbench, write_microbench_csv};
use bks_bench::records::summarize;
use bks_bench::sweep::{parse_caps, sweep_bucket_sizes, write_sweep_csv};

#[derive(Parser)]
#[command(
    name = "bks-bench",
    about = "Distributed data-parallel training benchmark driver"
)]
struct Cli {
    #[command(subcommand)]
    command: Option<Cmd>,

    #[command(flatten)]
    flags: Flags,
}

#[derive(Args)]
struct Flags {
    /// Flat key=value config file; command-line flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    rank: Option<u32>,

    #[arg(long, global = true)]
    world: Option<u32>,

    /// loopback or tcp.
    #[arg(long, global = true)]
    transport: Option<String>,

    #[arg(long, global = true)]
    master_addr: Option<String>,

    /// Model spec: small, medium, mlp:W0,W1,..., gated:...;branch=B;rule=R,
    /// centered:W0,W1,...
    #[arg(long, global = true)]
    model: Option<String>,

    #[arg(long, global = true)]
    iters: Option<u64>,

    /// Bucket cap in bytes; 0 = one bucket per parameter.
    #[arg(long, global = true)]
    bucket_cap_bytes: Option<String>,

    /// on or off.
    #[arg(long, global = true)]
    find_unused: Option<String>,

    /// Synchronize on iterations divisible by N, no_sync otherwise.
    #[arg(long, global = true)]
    skip_sync_every: Option<u64>,

    /// Number of inner process groups round-robined per collective.
    #[arg(long, global = true)]
    round_robin: Option<u32>,

    /// Simulated per-op latency (loopback only), milliseconds.
    #[arg(long, global = true)]
    alpha_ms: Option<f64>,

    /// Simulated bandwidth (loopback only), bytes per second.
    #[arg(long, global = true)]
    beta_bps: Option<f64>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Force the launch-after-backward baseline (no overlap).
    #[arg(long, global = true)]
    no_overlap: bool,

    /// Spawn this many rank processes on localhost (tcp only).
    #[arg(long, global = true)]
    launch_world: Option<u32>,

    /// Rows per rank per iteration.
    #[arg(long, global = true)]
    batch_size: Option<usize>,

    #[arg(long, global = true)]
    lr: Option<f64>,

    #[arg(long, global = true)]
    momentum: Option<f64>,

    /// Align ranks with a latency-free collective before each iteration.
    #[arg(long, global = true)]
    iteration_barrier: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Training run recording per-iteration latency and loss (default).
    Run,
    /// Per-iteration latency across bucket caps (loopback).
    Sweep {
        /// Comma-separated caps in bytes; 0 = per-parameter, max = one bucket.
        #[arg(long)]
        caps: String,
    },
    /// AllReduce a fixed total split into varying per-op sizes.
    Microbench {
        #[arg(long, default_value_t = 1_000_000)]
        total_elements: usize,
        /// Comma-separated per-op element counts; each must divide the total.
        #[arg(long)]
        per_op_sizes: String,
    },
    /// Loss trajectories across sync-skipping periods (loopback).
    Convergence {
        /// Comma-separated skip periods, e.g. 1,2,4,8.
        #[arg(long)]
        n_values: String,
    },
}

fn apply_flags(cfg: &mut RunConfig, f: &Flags) -> Result<()> {
    if let Some(v) = f.rank {
        cfg.rank = v;
    }
    if let Some(v) = f.world {
        cfg.world = v;
    }
    if let Some(v) = &f.transport {
        cfg.set("transport", v)?;
    }
    if let Some(v) = &f.master_addr {
        cfg.master_addr = v.clone();
    }
    if let Some(v) = &f.model {
        cfg.model = v.clone();
    }
    if let Some(v) = f.iters {
        cfg.iters = v;
    }
    if let Some(v) = &f.bucket_cap_bytes {
        cfg.set("bucket_cap_bytes", v)?;
    }
    if let Some(v) = &f.find_unused {
        cfg.set("find_unused", v)?;
    }
    if let Some(v) = f.skip_sync_every {
        cfg.skip_sync_every = v;
    }
    if let Some(v) = f.round_robin {
        cfg.round_robin = v;
    }
    if let Some(v) = f.alpha_ms {
        cfg.alpha_ms = v;
    }
    if let Some(v) = f.beta_bps {
        cfg.beta_bps = v;
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    if let Some(v) = &f.out {
        cfg.out = Some(v.clone());
    }
    if f.no_overlap {
        cfg.no_overlap = true;
    }
    if let Some(v) = f.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = f.lr {
        cfg.lr = v;
    }
    if let Some(v) = f.momentum {
        cfg.momentum = v;
    }
    if f.iteration_barrier {
        cfg.iteration_barrier = true;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.flags.config {
        cfg.apply_file(path)?;
    }
    apply_flags(&mut cfg, &cli.flags)?;

    if let Some(world) = cli.flags.launch_world {
        if cfg.transport != TransportKind::Tcp {
            bail!("--launch-world spawns rank processes and requires --transport tcp");
        }
        let exe = std::env::current_exe()?;
        let raw: Vec<String> = std::env::args().skip(1).collect();
        let args = strip_launcher_args(&raw);
        launch_local_world(&exe, &args, world)?;
        println!("launched world of {world}: all ranks exited cleanly");
        return Ok(());
    }

    cfg.validate()?;
    match cli.command.unwrap_or(Cmd::Run) {
        Cmd::Run => {
            let records = run_experiment(&cfg)?;
            let s = summarize(&records);
            println!(
                "rank {} done: {} iterations, mean {:.6}s p50 {:.6}s p95 {:.6}s (first {} warm-up excluded)",
                cfg.rank,
                records.len(),
                s.mean_total_s,
                s.p50_total_s,
                s.p95_total_s,
                bks_bench::records::WARMUP_ITERATIONS,
            );
        }
        Cmd::Sweep { caps } => {
            if cfg.transport != TransportKind::Loopback {
                bail!("sweep drives every rank as a thread and requires --transport loopback");
            }
            let rows = sweep_bucket_sizes(&cfg, &parse_caps(&caps)?)?;
            for r in &rows {
                println!(
                    "cap {:>12}: mean {:.6}s p50 {:.6}s p95 {:.6}s",
                    r.bucket_cap_bytes, r.mean_total_s, r.p50_total_s, r.p95_total_s
                );
            }
            if let Some(out) = &cfg.out {
                write_sweep_csv(out, &rows)?;
            }
        }
        Cmd::Microbench {
            total_elements,
            per_op_sizes,
        } => {
            let rows = run_microbench(&cfg, total_elements, &parse_sizes(&per_op_sizes)?)?;
            for r in &rows {
                println!(
                    "per-op {:>10} elements: {:.6}s total",
                    r.per_op_elements, r.total_seconds
                );
            }
            if cfg.rank == 0 {
                if let Some(out) = &cfg.out {
                    write_microbench_csv(out, &rows)?;
                }
            }
        }
        Cmd::Convergence { n_values } => {
            if cfg.transport != TransportKind::Loopback {
                bail!(
                    "convergence drives every rank as a thread and requires --transport loopback"
                );
            }
            let points = convergence_experiment(&cfg, &parse_n_values(&n_values)?)?;
            if let Some(out) = &cfg.out {
                write_convergence_csv(out, &points)?;
                println!("wrote {} points to {}", points.len(), out.display());
            } else {
                for p in points.iter().rev().take(4).rev() {
                    println!(
                        "n={} iter={} loss={} smoothed={}",
                        p.n, p.iteration, p.loss, p.smoothed_loss
                    );
                }
            }
        }
    }
    Ok(())
}
