use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
///
/// Variants are grouped so the CLI can map them onto its exit codes
/// (config → 2, data/schema → 3, numeric → 4).
#[derive(Debug, Error)]
pub enum QcmlError {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("train point {index} is in-bag for every tree; no out-of-bag cover")]
    NoOobCover { index: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl QcmlError {
    pub fn schema(msg: impl Into<String>) -> Self {
        QcmlError::Schema(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        QcmlError::Numeric(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        QcmlError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        QcmlError::Data(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        QcmlError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QcmlError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            QcmlError::Config { .. } | QcmlError::Usage(_) => 2,
            QcmlError::Numeric(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, QcmlError>;
