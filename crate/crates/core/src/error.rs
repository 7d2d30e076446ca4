use thiserror::Error;

/// Errors surfaced by the simulator and its front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training failure for client {client_id}: {reason}")]
    TrainingFailure { client_id: u32, reason: String },

    #[error("round aborted: {0}")]
    RoundAborted(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
