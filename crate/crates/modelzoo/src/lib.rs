//! Synthetic training workloads and a plain SGD optimizer.
//!
//! The models are deterministic functions of a seed, so every rank builds
//! bit-identical replicas before the initial broadcast even runs. A gated
//! branch option produces iteration- and rank-dependent dynamic graphs, and a
//! buffer-carrying variant exists to exercise buffer broadcast.

#![forbid(unsafe_code)]

mod data;
mod mlp;
mod sgd;

pub use data::SyntheticRegression;
pub use mlp::{build_mlp, CenteredMlp, GateRule, GatedBranch, Mlp, MlpSpec};
pub use sgd::{Sgd, SgdConfig};
