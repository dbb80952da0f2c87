use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("dimension mismatch in {op}: {details}")]
    Dimension { op: &'static str, details: String },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("non-finite value rejected at tensor construction")]
    NonFinite,

    #[error("backward called on a tensor detached from any graph")]
    DetachedBackward,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("duplicate hook registration on parameter {0}")]
    DuplicateHook(usize),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("post-accumulation hook failed for parameter {param_index}: {source}")]
    Hook {
        param_index: usize,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl AutogradError {
    pub(crate) fn dim(op: &'static str, details: String) -> Self {
        AutogradError::Dimension { op, details }
    }
}
