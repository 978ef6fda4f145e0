use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter {0} is not a differentiable leaf of this tape")]
    UnreachableParameter(usize),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("numeric overflow in {0}")]
    NumericOverflow(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("process parameters violate 0 <= cov < var (dimension {dim}: var={var}, cov={cov})")]
    InvalidProcessParams { dim: usize, var: f64, cov: f64 },

    #[error("singular matrix in {0}")]
    SingularMatrix(&'static str),

    #[error("undefined correlation: input has zero variance")]
    UndefinedCorrelation,

    #[error("malformed header {path}: {detail}")]
    Header { path: PathBuf, detail: String },

    #[error("size mismatch for {path}: expected {expected} bytes, found {found}")]
    SizeMismatch { path: PathBuf, expected: u64, found: u64 },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
