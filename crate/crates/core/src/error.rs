use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {x} outside truncation interval [{a}, {b}]")]
    OutsideTruncation { x: f64, a: f64, b: f64 },

    #[error("truncated normal requires a finite sigma > 0, got {0}")]
    InvalidSigma(f64),

    #[error("sigma = 0 requires an integer class count mu in 1..={classes}, got {mu}")]
    PointMassNotInteger { mu: f64, classes: usize },

    #[error("invalid class distribution: {0}")]
    InvalidClassDist(String),

    #[error("class {0} has no samples in the dataset pool")]
    EmptyClassPool(usize),

    #[error("non-positive rate: {what} = {value}")]
    NonPositiveRate { what: &'static str, value: f64 },

    #[error("model dimension must be positive")]
    EmptyModel,

    #[error("model dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("cannot aggregate an empty model list")]
    NothingToAggregate,

    #[error("non-finite training loss in round {round} (client {client:?})")]
    NonFiniteLoss { round: usize, client: Option<usize> },

    #[error("empty test set")]
    EmptyTestSet,

    #[error("dataset {path}: line {line}: {msg}")]
    DatasetFormat {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("failed to parse {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
