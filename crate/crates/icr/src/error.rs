//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IcrError {
    /// A caller-supplied value is out of its domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Shapes of vectors/matrices do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A numerical routine failed (singular system, divergence, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A file could not be read or written.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A file was read but its contents are not a valid document.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, IcrError>;

impl IcrError {
    /// Process exit code for the CLI: 2 for bad inputs, 3 for numerical
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            IcrError::Numerical(_) => 3,
            _ => 2,
        }
    }
}
