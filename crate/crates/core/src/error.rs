use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(String),
    #[error("row {row}, column {column}: cannot parse {value:?} as a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: label {value:?} is not 0 or 1")]
    BadLabel { row: usize, value: String },
    #[error("row {row}: expected {expected} fields, found {found}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}, column {column}: non-finite value")]
    NonFinite { row: usize, column: String },
    #[error("label column {0:?} not found in header")]
    MissingLabelColumn(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("index {index} out of range for {len} instances")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("instance {0} is already labeled")]
    AlreadyLabeled(usize),
    #[error("instance {0} has no label in the query state")]
    NotLabeled(usize),
    #[error("non-finite value in {context} at sample {index}")]
    NonFiniteValue { context: &'static str, index: usize },
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error("model version {found} is not supported (expected {expected})")]
    ModelVersion { expected: u32, found: u32 },
    #[error("episode is over; reset the environment")]
    EpisodeDone,
    #[error("no labeled training datasets")]
    NoLabeledDatasets,
    #[error("dataset {0:?} has no labels")]
    Unlabeled(String),
    #[error("query budget exhausted")]
    BudgetExhausted,
    #[error("all instances have been queried")]
    AllQueried,
    #[error("no pending query")]
    NoPendingQuery,
    #[error("instance {submitted} is not the pending query {pending}")]
    NotPending { submitted: usize, pending: usize },
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("strategy {0:?} needs a trained model")]
    StrategyNeedsModel(String),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
