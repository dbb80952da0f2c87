use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CollectiveError {
    #[error("rendezvous timed out after {0:?}")]
    RendezvousTimeout(Duration),

    #[error("rendezvous failed: {0}")]
    Rendezvous(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("protocol error: tensor length mismatch, local {local} elements vs remote {remote}")]
    LengthMismatch { local: u64, remote: u64 },

    #[error("transport error (peer rank {peer}): {message}")]
    Transport { peer: u32, message: String },

    #[error("usage error: {0}")]
    Usage(String),
}

impl CollectiveError {
    pub(crate) fn transport_io(peer: u32, err: std::io::Error) -> Self {
        CollectiveError::Transport {
            peer,
            message: err.to_string(),
        }
    }

    pub fn is_protocol(&self) -> bool {
        matches!(
            self,
            CollectiveError::Protocol(_) | CollectiveError::LengthMismatch { .. }
        )
    }

    pub fn is_timeout(&self) -> bool {
        matches!(self, CollectiveError::RendezvousTimeout(_))
    }
}
