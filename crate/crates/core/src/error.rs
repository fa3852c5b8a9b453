use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes or axes do not line up.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A configuration value is invalid (odd/even kernel, non power-of-two size, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// API misuse, e.g. calling backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    /// An image could not be decoded.
    #[error("ingestion error in {path} at byte {offset}: {message}")]
    Ingestion {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    /// A checkpoint or weight file is malformed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// NaN/inf encountered during training or gradient verification failed.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
