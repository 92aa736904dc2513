//! Crate-wide error type.

use std::fmt;

/// Errors surfaced by the tensor engine, the model and the data pipeline.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    Shape(String),
    /// An API was called in a way its contract forbids.
    Usage(String),
    /// User-supplied input (image, expression, video) is invalid.
    Input(String),
    /// On-disk data is malformed or inconsistent.
    Data(String),
    /// Configuration parsing or validation failed.
    Config(String),
    /// The synthetic generator could not satisfy its constraints.
    Generation(String),
    /// Checkpoint encoding/decoding failed.
    Checkpoint(String),
    /// Underlying I/O failure, annotated with the path involved.
    Io(String, std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Generation(m) => write!(f, "generation error: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Error::Io(path, e) => write!(f, "i/o error on {path}: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(_, e) => Some(e),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<String>, e: std::io::Error) -> Self {
        Error::Io(path.into(), e)
    }
}
