use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's precondition.
    #[error("rejected input: {0}")]
    InvalidInput(String),

    /// The input is well-formed but carries too little information (single class, empty group).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("format error in field `{field}`: {reason}")]
    Format { field: String, reason: String },

    #[error("configuration error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    /// A pipeline phase was requested before the phase producing its inputs ran.
    #[error("missing prerequisite: {0}")]
    Dependency(String),

    #[error("experiment directory is locked: {0}")]
    Locked(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Usage/configuration problems map to exit code 1, everything else to 2.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::InvalidInput(_))
    }
}
