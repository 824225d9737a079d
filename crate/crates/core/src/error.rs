//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed on-disk artifact (bad magic, truncated payload, parse failure).
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed input in a variant we deliberately do not handle.
    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A fit cannot succeed on the given data (e.g. fewer distinct points than clusters).
    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("unknown token {0} not in vocabulary")]
    Vocabulary(u32),

    #[error("utterance too short: {0}")]
    TooShort(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training failure: {0}")]
    Training(String),

    /// A pipeline stage's prerequisite artifact is missing or stale.
    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 dependency, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidParameter(_)
            | Error::Input(_)
            | Error::Unsupported(_) => 1,
            Error::Io(_) | Error::Format(_) | Error::Dependency(_) => 2,
            Error::Shape(_)
            | Error::Infeasible(_)
            | Error::Vocabulary(_)
            | Error::TooShort(_)
            | Error::Index(_)
            | Error::Numeric(_)
            | Error::Training(_) => 3,
        }
    }
}
