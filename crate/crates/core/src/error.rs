use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("gradient oracle failed: {0}")]
    Oracle(String),

    #[error("constant estimation failed: {0}")]
    Estimation(String),

    #[error("normalization undefined: ground truth has zero variance")]
    UndefinedNormalization,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("timestamps misaligned at line {line}: expected step {expected}, found {found}")]
    Alignment { line: u64, expected: u64, found: u64 },

    #[error("training diverged at round {round}, area {area}, step {step} (loss {loss})")]
    Divergence {
        round: usize,
        area: usize,
        step: usize,
        loss: f64,
    },

    #[error("local learning rate {local_lr} exceeds the admissible bound {bound}")]
    BoundViolation { local_lr: f64, bound: f64 },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape {
            context,
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
