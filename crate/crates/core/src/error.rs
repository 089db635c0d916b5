use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DbpError>;

#[derive(Debug, Error)]
pub enum DbpError {
    #[error("dimension mismatch at site `{site}`: expected {expected} columns, got {got}")]
    DimensionMismatch {
        site: String,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty batch: covariance needs at least one sample")]
    EmptyBatch,

    #[error("decorrelation loss is undefined for dimension {0} (need at least 2)")]
    UndefinedLoss(usize),

    #[error("numerical divergence in decorrelation matrix at site `{site}` during epoch {epoch}")]
    NumericalDivergence { site: String, epoch: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite training loss in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported dtype code {0}")]
    DtypeMismatch(u8),

    #[error("length mismatch: header implies {expected} payload bytes, found {found}")]
    LengthMismatch { expected: u64, found: u64 },

    #[error("checkpoint version {found} not supported (expected {expected})")]
    Version { found: u8, expected: u8 },

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error("{context}: {source}")]
    Annotated {
        context: String,
        #[source]
        source: Box<DbpError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DbpError {
    /// Wraps the error with a label such as `mode=DBP seed=3`.
    pub fn annotate(self, context: impl Into<String>) -> Self {
        DbpError::Annotated {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Strips annotation layers.
    pub fn root(&self) -> &DbpError {
        match self {
            DbpError::Annotated { source, .. } => source.root(),
            other => other,
        }
    }
}
