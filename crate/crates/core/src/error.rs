use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("degenerate synthetic spec: {0}")]
    DegenerateSpec(String),

    #[error("IDX parse error in {path}: {reason}")]
    Idx { path: String, reason: String },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("{what}: expected dimension {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("empty {0}")]
    Empty(String),

    #[error("unknown {what} {id}")]
    Unknown { what: &'static str, id: usize },

    #[error("task needs {needed} classes but the pool has {available}")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("class {class} has {available} instances, {needed} needed")]
    InsufficientInstances {
        class: usize,
        available: usize,
        needed: usize,
    },

    #[error("non-finite {0}")]
    NonFinite(String),

    #[error("class {class}: covariance is not positive definite after ridge")]
    SingularCovariance { class: usize },

    #[error("DDU detector scored before fit")]
    Unfitted,

    #[error("metric needs at least one {0} sample")]
    MissingClass(&'static str),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
