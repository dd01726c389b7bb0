//! Crate-wide error type and exit-code mapping for the CLI.

/// Errors surfaced by the public API.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an operation's precondition (bad shapes, out-of-range
    /// indices, invalid adapter targets, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid run configuration (CLI flags, config file, calibration range).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset ingestion / file-content problems.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values or a numerically failed decomposition.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint container is malformed or corrupted.
    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    /// (0 is success and 5 is the privacy-budget early stop, neither of
    /// which is an `Error`.)
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Config(_) => 2,
            Error::Data(_) | Error::Format(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn numeric(msg: impl Into<String>) -> Error {
    Error::Numeric(msg.into())
}
