use thiserror::Error;

#[derive(Debug, Error)]
pub enum GscError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A NaN or infinity surfaced during a computation. `stage` names where.
    #[error("non-finite value at {stage}")]
    NonFinite { stage: String },

    /// Training hit a non-finite value; carries where it happened.
    #[error("training aborted at epoch {epoch}, batch {batch}: non-finite value at {stage}")]
    TrainingAborted { epoch: usize, batch: usize, stage: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, GscError>;

pub(crate) fn invalid(msg: impl Into<String>) -> GscError {
    GscError::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> GscError {
    GscError::Shape(msg.into())
}
