use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("batch normalization needs at least 2 rows in train mode, got {0}")]
    DegenerateBatch(usize),

    #[error("masked loss has no valid target entries")]
    EmptyTarget,

    #[error("training diverged: non-finite gradient for `{0}`")]
    Diverged(String),

    #[error("invalid layer spec: {0}")]
    InvalidLayer(String),

    #[error("weights container: {0}")]
    Container(String),
}

pub type Result<T, E = NumError> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> NumError {
    NumError::Dimension {
        op,
        detail: detail.into(),
    }
}
