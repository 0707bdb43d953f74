use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("trace is empty")]
    EmptyTrace,

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("degenerate fit: {0}")]
    Degenerate(String),

    #[error("invalid parameter `{name}`: {msg}")]
    InvalidParam { name: &'static str, msg: String },

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidParam {
            name,
            msg: msg.into(),
        }
    }
}
