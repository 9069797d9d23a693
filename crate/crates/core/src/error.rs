use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tiff error on {path}: {message}")]
    Tiff { path: PathBuf, message: String },

    #[error("band-count mismatch: expected {expected} band(s), file has {found}")]
    BandCount { expected: usize, found: usize },

    #[error("missing geotransform in {0}")]
    MissingGeotransform(PathBuf),

    #[error("anisotropic pixels are not supported ({x} x {y})")]
    Anisotropic { x: f64, y: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid metadata mismatch: {0}")]
    MetaMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("target fraction {target:.4} unreachable; maximum achievable is {max_achievable:.4}")]
    TargetUnreachable { target: f64, max_achievable: f64 },

    #[error("insufficient valid pixels: need {needed}, found {found}")]
    InsufficientValid { needed: usize, found: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("unknown LoRA target `{0}` (expected `qkv` or `out_proj`)")]
    UnknownTarget(String),

    #[error("optimization diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("empty evaluation region")]
    EmptyRegion,

    #[error("weights: {0}")]
    Weights(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
