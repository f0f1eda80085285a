use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {msg}")]
    Image { path: String, msg: String },
    #[error("bad .flo magic {0} (expected 202021.25)")]
    BadMagic(f32),
    #[error(".flo payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("missing frame index {index} in {dir}")]
    MissingFrame { dir: String, index: usize },
    #[error("empty mask at frame {0}")]
    EmptyMask(usize),
    #[error("no valid trajectory after {0} attempts")]
    TrajectoryRejected(usize),
    #[error("frame {0} has missing pixels but no known pixels to copy flow from")]
    NoKnownPixels(usize),
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
