use std::path::PathBuf;

use mlog_autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("dataset not found: {0}")]
    MissingDataset(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("discriminator diverged: |F| = {value:e} at iteration {iteration} (logger {owner})")]
    DiscriminatorDiverged {
        owner: String,
        iteration: usize,
        value: f64,
    },
    #[error("non-finite training loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl CoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        CoreError::Argument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
