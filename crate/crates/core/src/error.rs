use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("loss is undefined: every mask set in the batch is empty")]
    UndefinedLoss,

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    /// Displays the path only; the io error is the source.
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
