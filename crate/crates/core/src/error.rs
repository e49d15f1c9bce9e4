use thiserror::Error;

/// Errors raised anywhere in the inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid map: {0}")]
    InvalidMap(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("simulator failure: {0}")]
    Simulator(String),
    #[error("training diverged at step {step}: {snapshot}")]
    TrainingDiverged { step: usize, snapshot: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
