use thiserror::Error;

/// Errors surfaced by the training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("architecture mismatch: checkpoint has {checkpoint:?}, model expects {expected:?}")]
    ArchitectureMismatch {
        checkpoint: Vec<Vec<usize>>,
        expected: Vec<Vec<usize>>,
    },

    #[error("unknown name: {0}")]
    UnknownName(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
