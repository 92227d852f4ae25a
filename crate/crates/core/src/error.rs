use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DvcError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid model head: softmax over an empty logit vector")]
    EmptyLogits,

    #[error("class label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid probability distribution (sum = {sum})")]
    InvalidDistribution { sum: f64 },

    #[error("constant column: correlation is undefined")]
    ConstantColumn,

    #[error("columns must have equal length >= 2 (got {0} and {1})")]
    ColumnLength(usize, usize),

    #[error("feature index {index} out of range for {features} features")]
    FeatureIndex { index: usize, features: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty chain prefix")]
    EmptyChain,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid block partition: {0}")]
    Partition(String),

    #[error("class {class} has too few samples: {reason}")]
    ClassCoverage { class: usize, reason: String },

    #[error("non-finite parameter after epoch {epoch}")]
    NonFinite { epoch: usize },

    #[error("empty leaf: no samples to label")]
    EmptyLeaf,

    #[error("class `{0}` was not seen in training")]
    UnknownClass(String),

    #[error("AUC needs both classes present")]
    AucClasses,

    #[error("{path}: row {row}, column {col}: {msg}")]
    Csv {
        path: PathBuf,
        row: usize,
        col: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    CsvParse(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DvcError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DvcError {
    let path = path.into();
    move |source| DvcError::Io { path, source }
}
