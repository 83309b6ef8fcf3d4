use thiserror::Error;

/// Errors raised across the library.
///
/// Configuration errors come from caller-supplied values, contract
/// violations from internally inconsistent inputs (mismatched shapes,
/// stale caches).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error at layer {layer}: {message}")]
    Numeric { layer: usize, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("client {client} diverged in round {round}: {message}")]
    Diverged {
        round: usize,
        client: usize,
        message: String,
    },

    #[error("data generation failed: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
