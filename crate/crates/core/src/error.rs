use thiserror::Error;

/// Errors raised anywhere in the training lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("optimizer error: {0}")]
    Optimizer(String),
    #[error("training diverged at global step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("record error: {0}")]
    Record(String),
    #[error("analysis error: {0}")]
    Analysis(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
