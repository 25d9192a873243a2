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
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("non-numeric value {value:?} in column {column:?} at row {row}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("label outside {{0,1}} at row {row}")]
    LabelOutOfRange { row: usize },

    #[error("accepted flag outside {{0,1}} at row {row}")]
    AcceptedOutOfRange { row: usize },

    #[error("duplicate row id {0}")]
    DuplicateId(String),

    #[error("missing value in column {column:?} at row {row}")]
    MissingValue { row: usize, column: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("labels required but dataset is unlabeled")]
    MissingLabels,

    #[error("both classes required, found only class {0}")]
    SingleClass(u8),

    #[error("non-finite feature value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("covariance matrix is not positive semi-definite")]
    NotPsd,

    #[error("{0} undefined: labels contain a single class")]
    MetricUndefined(&'static str),

    #[error("score {0} outside [0,1]")]
    ScoreOutOfRange(f64),

    #[error("isolation forest cannot split a constant feature matrix")]
    ConstantFeatures,

    #[error("{skipped} of {attempted} Monte-Carlo draws left the metric undefined")]
    TooManySkipped { skipped: usize, attempted: usize },

    #[error("empty partition part: {0}")]
    EmptyPart(&'static str),

    #[error("filtering removed every reject")]
    EmptyAfterFilter,

    #[error("simulation aborted: {0}")]
    Simulation(String),

    #[error("config error in field `{field}`: {message}")]
    Config { field: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
