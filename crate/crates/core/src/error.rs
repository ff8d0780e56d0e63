use csifb_diffcore::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum CsiError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{op}: expected shape {expected}, got {got}")]
    ShapeMismatch { op: &'static str, expected: String, got: String },
    #[error("{op}: zero-norm input")]
    ZeroNorm { op: &'static str },
    #[error("pearson correlation undefined: constant input")]
    ZeroVariance,
    #[error("invalid pilot interval {interval} for {m_total} subcarriers")]
    InvalidInterval { m_total: usize, interval: usize },
    #[error("interpolation needs at least two pilots when gaps are present")]
    TooFewPilots,
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("checkpoint does not match configuration: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CsiError {
    pub(crate) fn shape(op: &'static str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        CsiError::ShapeMismatch { op, expected: format!("{expected:?}"), got: format!("{got:?}") }
    }

    /// Configuration problems map to exit code 1, everything else to 2.
    pub fn is_config_error(&self) -> bool {
        matches!(self, CsiError::Config(_) | CsiError::CheckpointMismatch(_) | CsiError::InvalidInterval { .. })
    }
}

pub type Result<T, E = CsiError> = std::result::Result<T, E>;
