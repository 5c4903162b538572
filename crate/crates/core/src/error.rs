use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite function value at coordinate {coordinate}")]
    NonFinite { coordinate: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    /// Training diverged. `last_good` is the flattened checkpoint vector of the
    /// last parameters that produced a finite loss.
    #[error("training failed at epoch {epoch}: {reason}")]
    Training {
        reason: String,
        epoch: usize,
        last_good: Vec<f64>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
