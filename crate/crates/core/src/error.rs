use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape mismatch, empty batch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value or unknown key. The message names the key path.
    #[error("configuration error: {0}")]
    Config(String),

    /// A point lies outside the domain where a map is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// NaN or infinity surfaced where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// The flow could not produce enough usable samples.
    #[error("sampling failure: {0}")]
    Sampling(String),

    /// Malformed artifact on disk.
    #[error("{}: {msg}", path.display())]
    Artifact { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
