use thiserror::Error;

use crate::backends::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("{context}: {source}")]
    WithContext {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::WithContext { context: context.into(), source: Box::new(self) }
    }

    /// True when the root cause is a model-backend failure.
    pub fn is_backend(&self) -> bool {
        match self {
            Error::Backend(_) => true,
            Error::WithContext { source, .. } => source.is_backend(),
            _ => false,
        }
    }
}
