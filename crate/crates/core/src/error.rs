use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HorstError>;

#[derive(Debug, Error)]
pub enum HorstError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {head} head with {classes} classes")]
    LabelOutOfRange {
        head: &'static str,
        label: usize,
        classes: usize,
    },

    #[error(
        "non-finite loss at epoch {epoch} step {step}; largest gradient norm {norm:e} in `{block}`"
    )]
    NonFinite {
        epoch: usize,
        step: usize,
        block: String,
        norm: f64,
    },

    #[error("parse error in {path}: record {record}: {detail}")]
    Parse {
        path: PathBuf,
        record: String,
        detail: String,
    },

    #[error("{0}")]
    Graph(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HorstError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        HorstError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HorstError::Io {
            path: path.into(),
            source,
        }
    }
}
