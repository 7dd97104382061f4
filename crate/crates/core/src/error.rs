use thiserror::Error;

/// Errors raised anywhere in the selection / training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("data error at row {row:?}, column {column:?}: {message}")]
    Data {
        row: Option<usize>,
        column: Option<String>,
        message: String,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("training diverged at step {step} (tau = {tau}, k = {k}): {message}")]
    Diverged {
        step: usize,
        tau: f64,
        k: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn data(row: Option<usize>, column: Option<&str>, msg: impl Into<String>) -> Self {
        Error::Data {
            row,
            column: column.map(str::to_owned),
            message: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
