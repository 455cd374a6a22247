use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown task generator `{0}`")]
    UnknownGenerator(String),

    /// A reward group had zero spread; upstream rejection sampling should
    /// have discarded it.
    #[error("degenerate reward group: {0}")]
    DegenerateGroup(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
