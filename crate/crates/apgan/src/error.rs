//! Error type shared across the crate, with the CLI exit-code mapping.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// A caller passed a value outside an operation's domain (bad shape,
    /// dimension, index, range).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A required prior step has not happened (missing checkpoint, split or
    /// config-hash mismatch on resume).
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// The run configuration itself is malformed (unknown key, bad value).
    #[error("config error: {0}")]
    Config(String),

    /// An input file could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    /// A loss or activation became non-finite during training.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Machine-parsable category token printed by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => "config",
            Error::Precondition(_) | Error::Format(_) | Error::Io { .. } => "missing-input",
            Error::Numeric(_) => "numeric",
        }
    }

    /// Process exit status: 2 bad config, 3 missing/unreadable inputs,
    /// 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "missing-input" => 3,
            "numeric" => 4,
            _ => 1,
        }
    }
}
