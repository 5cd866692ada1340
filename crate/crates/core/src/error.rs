use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("wav: {0}")]
    Wav(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate vector: norm {norm:e} below 1e-8")]
    DegenerateNorm { norm: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("feature cache: line {line}: {msg}")]
    Cache { line: usize, msg: String },

    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }
}
