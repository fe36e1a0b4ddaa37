use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("optimizer state does not match parameters: {0}")]
    StateMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("held-out pool exhausted: need {needed} negatives, only {available} available")]
    PoolExhausted { needed: usize, available: usize },
    #[error("invalid gold label: {0}")]
    InvalidGold(String),
    #[error("duplicate task prefix {0}")]
    DuplicatePrefix(String),
    #[error("{}:{line}: {message}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("sequence length {len} exceeds the model maximum {max}")]
    LengthExceeded { len: usize, max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("vector has zero variance")]
    ConstantVector,
    #[error("prefix for task {0} is not in the vocabulary")]
    MissingPrefix(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("task {0} has no examples")]
    EmptyTask(String),
    #[error("unknown mixture strategy {0}")]
    UnknownStrategy(String),

    #[error("unsupported format {found:?}, expected {expected:?}")]
    Format { expected: String, found: String },
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::StateMismatch(_) => "state_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::PoolExhausted { .. } => "pool_exhausted",
            Error::InvalidGold(_) => "invalid_gold",
            Error::DuplicatePrefix(_) => "duplicate_prefix",
            Error::Parse { .. } => "parse",
            Error::EmptyCorpus => "empty_corpus",
            Error::LengthExceeded { .. } => "length_exceeded",
            Error::Config(_) => "config",
            Error::ConstantVector => "constant_vector",
            Error::MissingPrefix(_) => "missing_prefix",
            Error::UnknownTask(_) => "unknown_task",
            Error::EmptyTask(_) => "empty_task",
            Error::UnknownStrategy(_) => "unknown_strategy",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    /// True for errors caused by bad input data rather than by numerics or IO.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::PoolExhausted { .. }
                | Error::InvalidGold(_)
                | Error::DuplicatePrefix(_)
                | Error::Parse { .. }
                | Error::EmptyCorpus
                | Error::MissingPrefix(_)
                | Error::UnknownTask(_)
                | Error::EmptyTask(_)
                | Error::Format { .. }
                | Error::Json(_)
        )
    }

    /// True for errors raised by the tensor engine or a diverging run.
    pub fn is_numeric_error(&self) -> bool {
        matches!(
            self,
            Error::ShapeMismatch { .. }
                | Error::NonScalarLoss(_)
                | Error::StateMismatch(_)
                | Error::NonFinite(_)
                | Error::ConstantVector
        )
    }
}
