use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("dataset integrity: {0}")]
    Integrity(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("infeasible task: {0}")]
    Infeasible(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at {stage} (index {index})")]
    Numerical { stage: String, index: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("eigensolver: {0}")]
    Eigen(String),

    #[error("unsupported input: {0}")]
    Unsupported(String),

    #[error("dictionary build failed on source task {task_id}: {source}")]
    DictionaryBuild {
        task_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn numerical(stage: impl Into<String>, index: usize) -> Self {
        Error::Numerical {
            stage: stage.into(),
            index,
        }
    }
}
