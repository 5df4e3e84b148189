use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic")]
    BadMagic,

    #[error("truncated header")]
    TruncatedHeader,

    #[error("truncated payload")]
    TruncatedPayload,

    #[error("malformed container: {0}")]
    Format(String),

    #[error("dtype mismatch: file holds {found}, caller expects {expected}")]
    DType { expected: &'static str, found: String },

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("not a bijection: {0}")]
    InvalidPermutation(String),

    #[error("invalid scale range [{min}, {max}]: need 0 < s_min <= s_max")]
    InvalidRange { min: f64, max: f64 },

    #[error("zero scale entry at {0}")]
    ZeroScale(String),

    #[error("zero-norm row: layer {layer}, head {head}, coordinate {coord} ({tensor})")]
    ZeroNormRow {
        tensor: &'static str,
        layer: usize,
        head: usize,
        coord: usize,
    },

    #[error("missing merge coefficient for task {task}, layer {layer}")]
    MissingCoefficient { task: usize, layer: usize },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
