use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("negative diagonal entry {value} at index {index}")]
    NegativeDiagonal { index: usize, value: f64 },

    #[error("rank k = {0} is invalid; k must be at least 2")]
    Rank(usize),

    #[error("singular covariance: effective variance {value} at index {index} is not positive")]
    SingularCovariance { index: usize, value: f64 },

    #[error("Cholesky factorization of the inner k x k system (I + A^T D^-1 A) failed: not positive definite")]
    InnerFactorization,

    #[error("dense covariance refused for d = {0} (limit {limit})", limit = crate::prior::DENSE_LIMIT)]
    TooLarge(usize),

    #[error("invalid prior specification: {0}")]
    Prior(String),

    #[error("swag: {0}")]
    Swag(String),

    #[error("label {label} out of range for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}; the learning rate is probably too large")]
    Diverged { step: usize },

    #[error("data: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Csv { path: PathBuf, line: u64, msg: String },

    #[error("metric: {0}")]
    Metric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
