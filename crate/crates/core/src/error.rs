use std::path::PathBuf;

/// Errors surfaced by the library. Variants map onto the failure classes
/// the CLI turns into distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation was called outside its contract (shape mismatch,
    /// out-of-range timestep, non-scalar loss, missing gradient, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is invalid or two configured artifacts are
    /// inconsistent with each other (e.g. checkpoint vs. schedule).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A computation produced NaN/Inf where finite values are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A file exists but does not parse as the expected format.
    #[error("malformed file {path:?}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
