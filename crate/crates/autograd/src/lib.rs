//! Dense fp64 tensors and reverse-mode automatic differentiation.
//!
//! The graph is rebuilt on every forward pass and consumed by [`backward`].
//! Leaf tensors are [`Parameter`]s; each parameter owns a gradient
//! accumulator that fires post-accumulation hooks, which is the interception
//! point a gradient reducer hangs off of.

#![forbid(unsafe_code)]

mod engine;
mod error;
mod graph;
mod ops;
mod param;
pub mod rng;
mod tensor;

pub use engine::backward;
pub use error::AutogradError;
pub use graph::traverse_reachable_params;
pub use ops::mse_loss;
pub use param::{HookFn, HookResult, Model, Parameter, ParameterSet};
pub use tensor::Tensor;
