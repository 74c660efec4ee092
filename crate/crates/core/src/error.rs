use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate input in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("finite-difference oracle failed: {0}")]
    OracleFailure(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unknown queue key {0}")]
    UnknownQueue(String),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    #[error("checkpoint corrupted: {0}")]
    Corrupted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Degenerate { op, detail: detail.into() }
    }

    /// Process exit code for the command-line front end:
    /// 2 config error, 3 data error, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Data(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Version { .. }
            | Error::Corrupted(_) => 3,
            Error::Shape { .. }
            | Error::Degenerate { .. }
            | Error::OracleFailure(_)
            | Error::NonFinite(_)
            | Error::UnknownQueue(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
