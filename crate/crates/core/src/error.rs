use std::path::PathBuf;

use thiserror::Error;

use crate::data::fmeb::FmebError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A vector whose norm is zero was passed where a direction is required.
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),

    #[error("class {0} is not known to this client")]
    UnknownClass(usize),

    #[error("class set mismatch: {0}")]
    ClassSetMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("not enough data: {0}")]
    NotEnoughData(String),

    #[error(transparent)]
    Fmeb(#[from] FmebError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
