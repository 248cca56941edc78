use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(
        "episode sampling infeasible after {attempts} attempts; deficient classes: {classes:?}"
    )]
    Infeasible {
        attempts: usize,
        classes: Vec<String>,
    },

    #[error("prompt construction failed: {0}")]
    Prompt(String),

    #[error("sentence {sentence} needs {needed} positions but the encoder allows {limit}")]
    SequenceTooLong {
        sentence: String,
        needed: usize,
        limit: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("support set has no gold entity mentions")]
    EmptyBank,

    #[error("mean over an empty set of spans is undefined")]
    EmptyMean,

    #[error("non-finite loss {value} on sentence {sentence}")]
    NonFiniteLoss { sentence: String, value: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("run error: {0}")]
    Run(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
