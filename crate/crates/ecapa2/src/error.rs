//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Convolution or pooling geometry produces an empty output.
    #[error("invalid geometry: {0}")]
    Geometry(String),

    /// A NaN or infinity was produced or ingested.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Numeric failure other than non-finite values (divergence, degenerate
    /// statistics).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Bad command-line usage or malformed configuration.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed or inconsistent data files (WAV, checkpoints, trial lists).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Shape(_) | Error::Geometry(_) | Error::Data(_) | Error::Io(_) => 2,
            Error::NonFinite(_) | Error::Numeric(_) => 3,
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn data_err(msg: impl Into<String>) -> Error {
    Error::Data(msg.into())
}
