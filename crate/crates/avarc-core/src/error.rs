//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: String,
        expected: String,
        got: String,
    },

    #[error("invalid token id {id} for vocabulary of size {vocab}")]
    InvalidToken { id: u32, vocab: usize },

    #[error("label id {id} out of range for {n_classes} classes")]
    LabelOutOfRange { id: usize, n_classes: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("missing capability: {0}")]
    Capability(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("incompatible models: {0}")]
    Incompatible(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
