//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Wrong magic bytes or an unreadable container header.
    #[error("format error: {0}")]
    Format(String),

    /// Manifest and payload disagree (shapes, lengths, missing tensors).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Architecture variant this engine does not implement.
    #[error("capability error: {0}")]
    Capability(String),

    #[error("sequence of {len} tokens exceeds max context {max}")]
    Length { len: usize, max: usize },

    #[error("{what} index {index} out of range (limit {limit})")]
    Range {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    /// Generation hit the context limit; carries what was produced so far.
    #[error("generation truncated after {} bytes at context limit", partial.len())]
    Truncation { partial: Vec<u8> },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("battery integrity error: {0}")]
    BatteryIntegrity(String),

    #[error("ingestion error in {path}: {msg}")]
    Ingestion { path: PathBuf, msg: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("function-vector store error: {0}")]
    Store(String),

    #[error("stage dependency error: {0}")]
    Dependency(String),

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data/integrity, 3 capability,
    /// 4 partial-stage failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) | Error::Range { .. } | Error::Length { .. } => 1,
            Error::Capability(_) => 3,
            Error::Dependency(_) | Error::Stage { .. } => 4,
            _ => 2,
        }
    }
}
