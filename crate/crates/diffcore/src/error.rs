use thiserror::Error;

/// Errors raised by the differentiation engine.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch { op: &'static str, expected: String, got: String },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("{op}: cannot normalize a zero-norm vector")]
    ZeroNorm { op: &'static str },
    #[error("batch normalization in training mode needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DiffError {
    pub(crate) fn shape(op: &'static str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        DiffError::ShapeMismatch { op, expected: format!("{expected:?}"), got: format!("{got:?}") }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        DiffError::InvalidArgument { op, reason: reason.into() }
    }
}

pub type Result<T, E = DiffError> = std::result::Result<T, E>;
