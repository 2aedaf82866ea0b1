use std::path::PathBuf;

use thiserror::Error;

/// Error type shared across the pipeline crates.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("indexed palette required: {0}")]
    NotIndexed(PathBuf),

    #[error("no sequences found under {0}")]
    EmptyDataset(PathBuf),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label exceeds 8-bit index range: {0}")]
    LabelOutOfRange(u32),

    #[error("unknown label {0} not in object id set")]
    UnknownLabel(u32),

    #[error("missing predicted frames: {0}")]
    MissingPrediction(String),

    #[error("read before first admit")]
    EmptyMemory,

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        PipelineError::Image {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True when the error denotes empty or invalid user input rather than an
    /// internal failure. The CLI maps these to exit code 2.
    pub fn is_empty_input(&self) -> bool {
        matches!(
            self,
            PipelineError::EmptyDataset(_) | PipelineError::InvalidInput(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
