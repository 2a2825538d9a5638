use crosspath_numkit::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error in field `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersion { expected: String, found: String },
    #[error("degenerate split for instance {instance}: split index {index} of {len}")]
    DegenerateSplit { instance: String, index: usize, len: usize },
    #[error("state error: {0}")]
    State(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("build error: {0}")]
    Build(String),
    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<CoreError>,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("size error: {0}")]
    Size(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

impl CoreError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        CoreError::Schema {
            field: field.into(),
            message: message.into(),
        }
    }
}
