//! Error type shared across the crate.
//!
//! The CLI maps variants onto exit codes: usage errors exit 1, data and
//! format errors exit 2, numerical failures (NaN loss) exit 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or volume shapes do not line up.
    #[error("dimension error: {0}")]
    Dim(String),

    /// An input value violates a precondition (out-of-range label,
    /// degenerate box, bad config value, ...).
    #[error("input error: {0}")]
    Input(String),

    /// The API was called in a way that cannot be satisfied (non-scalar
    /// loss, empty minibatch, missing gradient, bad CLI invocation).
    #[error("usage error: {0}")]
    Usage(String),

    /// A file does not conform to its declared format.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Training produced a non-finite loss.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Dim(_) | Error::Input(_) | Error::Format(_) | Error::Io(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}
