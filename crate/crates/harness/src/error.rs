use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: no such file")]
    MissingFile { path: PathBuf },
    #[error("{path}: byte {offset}: {message}")]
    Parse { path: PathBuf, offset: usize, message: String },
    #[error("{path}:{line}: {message}")]
    Config { path: PathBuf, line: usize, message: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("non-finite loss at epoch {epoch}, step {step}; last good checkpoint at {checkpoint}")]
    Diverged { epoch: usize, step: usize, checkpoint: PathBuf },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] softprune::Error),
}

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            HarnessError::MissingFile { path }
        } else {
            HarnessError::Io { path, source }
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
