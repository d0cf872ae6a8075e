use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty statistic group")]
    EmptyGroup,

    #[error("index {index} out of bounds for tensor of length {len}")]
    IndexOutOfBounds { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("group count exceeds dimension: G = {groups}, limit = {limit}")]
    GroupCountExceedsDimension { groups: usize, limit: usize },

    #[error("invalid group count: {0}")]
    InvalidGroupCount(usize),

    #[error("non-finite activation")]
    NonFiniteActivation,

    #[error("running-stat shape mismatch: expected {expected} slots, got {actual}")]
    RunningStatShape { expected: usize, actual: usize },

    #[error("running statistics are not defined for {0}")]
    NoRunningStats(&'static str),

    #[error("non-finite function value during finite differencing")]
    NonFiniteFunction,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupt batch file {path}: {reason}")]
    CorruptBatchFile { path: PathBuf, reason: String },

    #[error("malformed CSV: {0}")]
    MalformedCsv(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
