use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] vase_core::Error),
    #[error(transparent)]
    Checkpoint(#[from] vase_autograd::CheckpointError),
    #[error("config: {0}")]
    Config(String),
    #[error("shape mismatch for `{tensor}`: {detail}")]
    Shape { tensor: String, detail: String },
    #[error("non-finite output at {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}: loss {loss} exceeded 10x the initial {initial} for {window} consecutive steps")]
    Diverged { step: usize, loss: f64, initial: f64, window: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("edit has an empty reference mask and an empty source mask")]
    EmptyEdit,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
