use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the engine.
///
/// Each variant maps to a stable machine-readable code (see [`Error::code`]) that the CLI
/// prints as a prefix of its single-line error message.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("parse error in {field}: {msg}")]
    Parse { field: String, msg: String },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
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
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "E_DIM",
            Error::Config(_) => "E_CONFIG",
            Error::Capacity(_) => "E_CAPACITY",
            Error::Input(_) => "E_INPUT",
            Error::Usage(_) => "E_USAGE",
            Error::State(_) => "E_STATE",
            Error::Parse { .. } => "E_PARSE",
            Error::Degenerate(_) => "E_DEGENERATE",
            Error::Format { .. } => "E_FORMAT",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
