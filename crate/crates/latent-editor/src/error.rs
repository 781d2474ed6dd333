//! Error type shared across the crate.

/// Crate-wide error enum. The CLI maps `Config`/`Format` to exit code 2 and
/// everything else to exit code 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A runtime contract was violated (shape mismatch, non-finite data, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// An on-disk artifact is malformed (bad magic, truncated payload, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Bad user-supplied configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A point could not be projected (at or behind the camera plane).
    #[error("projection error: point {index} has non-positive depth {depth}")]
    Projection { index: usize, depth: f64 },

    /// The proxy Gram matrix is singular; carries the (approximate) null
    /// direction in camera-parameter space.
    #[error("rank-deficient camera Gram matrix; null direction {null_direction:?}")]
    RankDeficient { null_direction: Vec<f64> },

    /// The requested quantity is mathematically undefined for these inputs.
    #[error("undefined result: {0}")]
    Undefined(String),

    /// A training step produced a non-finite loss or parameter and was rejected.
    #[error("non-finite {what} at step {step}; state left untouched")]
    NonFinite { what: &'static str, step: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
