//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes: configuration
//! problems, bad input data (including malformed weight files), and numeric
//! failures detected at runtime.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor or parameter shapes disagree. The message names the offending
    /// dimension.
    #[error("shape error: {0}")]
    Shape(String),

    /// Malformed or inconsistent input data (CSV rows, cohorts, images).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values or degenerate numeric state.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Weights container: magic bytes or a record header are invalid.
    #[error("weights file: corrupt header: {0}")]
    CorruptHeader(String),

    /// Weights container: the file ends inside a record.
    #[error("weights file: truncated payload: {0}")]
    TruncatedPayload(String),

    /// Weights container: recorded tensor shapes disagree with the
    /// architecture they are loaded for.
    #[error("weights file: shape mismatch: {0}")]
    WeightsShapeMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for CLI use: 2 config, 3 data/io, 4 numeric/shape.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::Io(_)
            | Error::CorruptHeader(_)
            | Error::TruncatedPayload(_)
            | Error::WeightsShapeMismatch(_) => 3,
            Error::Shape(_) | Error::Numeric(_) => 4,
        }
    }
}
