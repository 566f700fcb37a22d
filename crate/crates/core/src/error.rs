use stlt_engine::EngineError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StltError {
    #[error(transparent)]
    Engine(#[from] EngineError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("malformed box [{x1}, {y1}, {x2}, {y2}]")]
    MalformedBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("non-finite loss at step {step} (batch: {})", batch_ids.join(", "))]
    NonFiniteLoss { step: u64, batch_ids: Vec<String> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = StltError> = std::result::Result<T, E>;

impl StltError {
    /// Process exit code: 2 configuration, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            StltError::Config(_) => 2,
            StltError::Engine(EngineError::Config(_)) => 2,
            StltError::NonFiniteLoss { .. } => 4,
            StltError::Engine(EngineError::NonFinite(_)) => 4,
            _ => 3,
        }
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> StltError {
    StltError::Config(msg.into())
}

pub(crate) fn data_err(msg: impl Into<String>) -> StltError {
    StltError::Data(msg.into())
}
