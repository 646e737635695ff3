use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid dataset spec: {0}")]
    Spec(String),

    #[error("manifest parse error at line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("coverage error: identity {identity} has no {modality} images")]
    Coverage { identity: u32, modality: &'static str },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("degenerate prototype {index}: mask mass {mass:e} below threshold")]
    DegeneratePrototype { index: usize, mass: f64 },

    #[error("contrastive loss needs at least two prototypes per sample, got {0}")]
    NoNegatives(usize),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite training loss at epoch {epoch}, batch {batch}: {terms}")]
    Diverged {
        epoch: usize,
        batch: usize,
        terms: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
