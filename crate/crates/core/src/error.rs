use thiserror::Error;

/// Errors produced by the generator, network engine, trainer and verifier.
#[derive(Debug, Error)]
pub enum QgtError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("singular system: Gram matrix condition estimate {condition:.3e} after ridge={ridge_applied}")]
    SingularSystem { condition: f64, ridge_applied: bool },

    #[error("degenerate clustering: {0}")]
    DegenerateClustering(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, QgtError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(QgtError::InvalidArgument(msg.into()))
}
