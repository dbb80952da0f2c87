//! Data-parallel gradient reducer.
//!
//! [`DataParallel`] wraps a model, broadcasts rank 0's state at construction,
//! packs parameters into buckets in reverse registration order, and overlaps
//! bucket AllReduce with the backward pass through post-accumulation hooks.
//! Unused parameters are handled with a participation bitmap OR-reduced
//! across ranks, and a `no_sync` scope accumulates gradients locally across
//! micro-batches.

#![forbid(unsafe_code)]

mod bucket;
mod error;
mod reducer;

pub use bucket::{bucket_layout, BucketSlot};
pub use error::ReducerError;
pub use reducer::{DataParallel, ReducerConfig, DEFAULT_BUCKET_CAP_BYTES};
