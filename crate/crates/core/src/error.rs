use thiserror::Error;

use crate::nncore::NnError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("scene generation failed: {0}")]
    Scene(String),
    #[error("training diverged at step {step}: total loss is not finite")]
    Divergence { step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
