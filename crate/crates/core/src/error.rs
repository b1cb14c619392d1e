use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("invalid problem specification: {0}")]
    InvalidSpec(String),

    #[error("point {point:?} lies outside the closed box")]
    Domain { point: Vec<f64> },

    #[error("evaluation produced a non-finite value: {0}")]
    Evaluation(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("simulation failure: {0}")]
    Simulation(String),

    #[error("verification failure: {0}")]
    Verification(String),

    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    #[error("dimension mismatch: {0}")]
    Mismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        LabError::Parse {
            offset,
            message: message.into(),
        }
    }
}
