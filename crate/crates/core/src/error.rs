use std::path::PathBuf;

use crate::tensorio::TensorIoError;

/// Errors raised by the registration toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    TensorIo(#[from] TensorIoError),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("unsupported spatial rank {0} (expected 2 or 3)")]
    UnsupportedRank(usize),

    #[error("spatial extent {extent} on axis {axis} is too small for finite differences")]
    DegenerateExtent { axis: usize, extent: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("expected dtype {expected}, got {actual}")]
    DType {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("label {label} out of range for {n} regions")]
    LabelOutOfRange { label: i32, n: usize },

    #[error("embedding row {0} has zero norm")]
    ZeroNormRow(usize),

    #[error("singular value decomposition did not converge")]
    SvdNonConvergence,

    #[error("label count mismatch: embeddings carry {embeddings} regions, data uses {data}")]
    LabelCountMismatch { embeddings: usize, data: usize },

    #[error("sweep is degenerate: {0}")]
    DegenerateSweep(&'static str),

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("backward called without a recorded forward graph")]
    StaleGraph,

    #[error("loss node must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("could not place {wanted} regions after {attempts} attempts")]
    Crowded { wanted: usize, attempts: usize },

    #[error("random field still folds after {0} attempts")]
    TooRough(usize),

    #[error("non-finite loss at epoch {epoch} (lr {lr:e})")]
    NonFiniteLoss { epoch: usize, lr: f64 },

    #[error("empty {0}")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
