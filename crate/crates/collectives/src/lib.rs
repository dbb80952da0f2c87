//! Collective communication process groups.
//!
//! A [`ProcessGroup`] is an ordered collective endpoint identified by
//! (rank, world size). Collectives are issued asynchronously and return
//! [`Work`] handles; each group owns one background progress worker, so
//! handles complete in issue order. Two transports share the same
//! reduce-scatter / all-gather ring code path: an in-process loopback with an
//! injectable alpha-beta latency model, and TCP sockets over a ring of
//! localhost peers. A round-robin composite dispatches successive collectives
//! across several inner groups.

#![forbid(unsafe_code)]

mod cost;
mod error;
mod frame;
mod group;
mod loopback;
mod ring;
mod tcp;
mod worker;

pub use cost::{loopback_cost, LatencyModel};
pub use error::CollectiveError;
pub use frame::{Header, OpKind, FRAME_MAGIC, HEADER_LEN};
pub use group::{
    rendezvous, GroupConfig, ProcessGroup, Transport, Work, DEFAULT_RENDEZVOUS_TIMEOUT,
};
pub use loopback::LoopbackFabric;
pub use ring::chunk_ranges;
