use std::io;
use thiserror::Error;

/// Crate-wide error type.
///
/// The variant split mirrors how callers react: `Format`, `Shape`, `Config`
/// and `Usage` indicate bad inputs (a CLI maps them to exit code 2), while
/// `Io` is a genuine runtime failure (exit code 1).
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// A file does not match its declared on-disk format.
    #[error("format error: {0}")]
    Format(String),

    /// Tensor or image dimensions are inconsistent.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A parameter is out of its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation was invoked in a state it does not support
    /// (e.g. scoring with an untrained model).
    #[error("usage error: {0}")]
    Usage(String),

    /// A metric is undefined for the given inputs (e.g. BDR with no
    /// flagged samples).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

impl Error {
    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_usage(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
