use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: {0}")]
    InputShape(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("unsupported representation: {0}")]
    UnsupportedRepresentation(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Local gradient descent is only guaranteed stable when every client
    /// satisfies `eta * ||K_i|| < 1`.
    #[error("unstable local dynamics: client {client} has gamma = {gamma:.6} >= 1")]
    Stability { client: usize, gamma: f64 },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InputShape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
