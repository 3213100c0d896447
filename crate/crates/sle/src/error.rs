use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("state error: {0}")]
    State(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("trace reconstruction failed at step {step}: {reason}")]
    Reconstruction { step: usize, reason: String },

    #[error("observer failed at step {step}: {reason}")]
    Observer { step: usize, reason: String },

    #[error("range error: {0}")]
    Range(String),
}

pub type Result<T> = std::result::Result<T, Error>;
