//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TglError>;

#[derive(Debug, Error)]
pub enum TglError {
    #[error("shape mismatch: {op} on {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("profiling error: {0}")]
    Profile(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("training error: {0}")]
    Train(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl TglError {
    pub fn input(msg: impl Into<String>) -> Self {
        TglError::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        TglError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        TglError::Data(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        TglError::Checkpoint(msg.into())
    }

    pub fn train(msg: impl Into<String>) -> Self {
        TglError::Train(msg.into())
    }

    pub fn eval(msg: impl Into<String>) -> Self {
        TglError::Eval(msg.into())
    }
}
