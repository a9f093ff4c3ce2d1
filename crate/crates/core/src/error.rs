use thiserror::Error;

/// Error categories used across the crate. Each maps to a distinct CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad hyperparameters, missing checkpoints, unknown keys.
    #[error("config: {0}")]
    Config(String),
    /// Tensor or label-map dimensions violate an operation's shape contract.
    #[error("shape: {0}")]
    Shape(String),
    /// Dataset contents are invalid (class out of range, dim mismatch, missing file).
    #[error("data: {0}")]
    Data(String),
    /// On-disk format violation: bad magic, version, truncation, CRC mismatch.
    #[error("format: {0}")]
    Format(String),
    /// Non-finite values where finite arithmetic is required.
    #[error("numeric: {0}")]
    Numeric(String),
    /// Operation invoked in an invalid order.
    #[error("state: {0}")]
    State(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-parsable prefix, also used to pick the process exit code.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Data(_) => "data",
            Error::Format(_) => "format",
            Error::Numeric(_) => "numeric",
            Error::State(_) => "state",
            Error::Io(_) => "io",
        }
    }
}
