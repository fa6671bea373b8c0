use thiserror::Error;

pub type Result<T, E = MfmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MfmError {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("model is untrained: {0}")]
    Untrained(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl MfmError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        MfmError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MfmError::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        MfmError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
