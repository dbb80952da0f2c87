use bks_collectives::CollectiveError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReducerError {
    #[error("state broadcast at construction failed: {source}")]
    Broadcast {
        #[source]
        source: CollectiveError,
    },

    #[error("collective failed for bucket {bucket}: {source}")]
    Collective {
        bucket: usize,
        #[source]
        source: CollectiveError,
    },

    #[error("bitmap allreduce failed: {source}")]
    Bitmap {
        #[source]
        source: CollectiveError,
    },

    #[error(
        "previous iteration never finished reduction; a parameter went unused \
         in the backward pass (enable find_unused_parameters)"
    )]
    PriorIterationUnfinished,

    #[error("model parameter list changed after construction; re-bucketing is unsupported")]
    ModelMutated,

    #[error("no_sync scopes cannot nest")]
    NestedNoSync,

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Autograd(#[from] bks_autograd::AutogradError),
}
