//! Shared error type for the whole crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or index mismatch in a tensor/tape operation.
    #[error("dimension error in {op}: {details}")]
    Dim { op: &'static str, details: String },

    /// An operation produced NaN or +-inf. Always a bug or a diverged run;
    /// we stop instead of propagating poison.
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    /// Text input (story, graph file, formula, checkpoint, config) failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Structured file contents are well-formed but violate a contract
    /// (dangling node id, version mismatch, missing tensor, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Bad run configuration (unknown key, out-of-range value, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Task generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generate(String),

    /// Training aborted (non-finite gradient, empty dataset, ...).
    #[error("training error: {0}")]
    Train(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(op: &'static str, details: impl Into<String>) -> Self {
        Error::Dim { op, details: details.into() }
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
