use thiserror::Error;

/// Errors surfaced by the monitoring engine.
#[derive(Debug, Error)]
pub enum RelmonError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error at row {row}: {msg}")]
    Data { row: usize, msg: String },

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("internal state error: {0}")]
    State(String),

    #[error("scenario generation error: {0}")]
    Generation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RelmonError>;
