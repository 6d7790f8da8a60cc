use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input is well-formed but violates a documented range or precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Shapes, lengths or file layouts do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("{path}:{line}: {msg}")]
    Ingest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("non-finite gradient in parameter `{param}`")]
    NonFinite { param: String },

    #[error("circular mean undefined: resultant length {0:e}")]
    UndefinedMean(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    /// True for failures caused by the caller's data rather than by files or shapes.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::NonFinite { .. } | Error::UndefinedMean(_)
        )
    }
}
