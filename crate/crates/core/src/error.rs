//! Error taxonomy shared by every module.
//!
//! The CLI maps these onto process exit codes, so the variants are part of
//! the public contract: config/validation/dimension/contract problems are
//! caller errors, numeric problems mean a computation produced non-finite
//! values, and I/O problems are environmental.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up; the message names both shapes.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A configuration failed validation; the message enumerates violations.
    #[error("config error: {0}")]
    Config(String),

    /// Input data violates a precondition (labels outside {0,1}, empty sets, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A computation produced NaN or infinity.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An internal API contract was violated (mismatched tape, bad metadata).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code used by the CLI: 1 validation/config, 2 numeric, 3 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dim(_) | Error::Config(_) | Error::Validation(_) | Error::Contract(_) => 1,
            Error::Numeric(_) => 2,
            Error::Io(_) => 3,
        }
    }
}
