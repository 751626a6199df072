use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad magic, version or dtype tag, or a malformed JSON/CSV/label file.
    #[error("format error: {0}")]
    Format(String),

    /// Header and payload disagree (truncated or padded file).
    #[error("corrupt file: {0}")]
    Corrupt(String),

    /// A value violates a numeric domain (NaN, Inf, negative variance, ...).
    #[error("invalid value: {0}")]
    Value(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Inconsistent arguments: dimension mismatch, out-of-range index, empty grid.
    #[error("invalid argument: {0}")]
    Arg(String),

    /// Input that makes the requested quantity undefined (zero-norm vectors).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A factorisation or inverse failed or produced non-finite numbers.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
