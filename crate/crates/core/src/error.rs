use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed CIFAR-10 file: {0}")]
    MalformedFile(String),

    #[error("corrupt record {index}: label byte {label} is outside 0..=9")]
    CorruptRecord { index: usize, label: u8 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("channel {channel} has zero variance")]
    DegenerateChannel { channel: usize },

    #[error("unknown seed id {0}")]
    UnknownSeed(usize),

    #[error("non-finite activation at layer {layer}")]
    NumericOverflow { layer: usize },

    #[error("non-finite loss at epoch {epoch}, step {step} ({term})")]
    NonFiniteLoss { epoch: usize, step: usize, term: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate batch: all pairwise activation distances are zero")]
    DegenerateBatch,

    #[error("degenerate features at layer {layer} (image {image}): mean reference distance is zero")]
    DegenerateFeatures { layer: usize, image: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("dataset cache {path}: {reason}")]
    Cache { path: PathBuf, reason: String },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("missing input: {0}")]
    MissingInput(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
