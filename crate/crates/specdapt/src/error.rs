//! Error type shared across the toolkit.
//!
//! Every error maps onto one of the CLI exit-code categories:
//! validation problems (exit 2), corrupt or unreadable files (exit 3)
//! and degenerate statistics (exit 4).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid input, configuration, or shape contract violation.
    #[error("validation: {0}")]
    Validation(String),

    /// A file failed a magic/format/hash check or could not be read.
    #[error("corrupt file: {0}")]
    CorruptFile(String),

    /// A statistical procedure has no defined answer on this input.
    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    /// Non-finite value produced where the numeric contract forbids it.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn corrupt(msg: impl Into<String>) -> Self {
        Error::CorruptFile(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateStats(msg.into())
    }

    pub fn non_finite(msg: impl Into<String>) -> Self {
        Error::NonFinite(msg.into())
    }

    /// Process exit code for the CLI: 2 validation, 3 corrupt, 4 degenerate.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::NonFinite(_) => 2,
            Error::CorruptFile(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::DegenerateStats(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
