//! Benchmark and experiment driver for the data-parallel training engine.
//!
//! Runs training loops over loopback (threaded ranks in one process, with an
//! injectable alpha-beta latency model) or TCP (one process per rank, spawned
//! by the launcher), recording per-iteration latency breakdowns as CSV.

#![forbid(unsafe_code)]

pub mod config;
pub mod convergence;
pub mod experiment;
pub mod launcher;
pub mod microbench;
pub mod records;
pub mod sweep;

pub use config::{resolve_model, v_hash, ModelKind, RunConfig, TransportKind};
pub use experiment::{run_experiment, run_loopback_world, run_single_rank};
pub use records::{summarize, IterationRecord, Summary, WARMUP_ITERATIONS};
