use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: field `{field}`: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("unsupported schema_version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("primitive {index}: {message}")]
    Validation { index: usize, message: String },

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("render failed at primitive {index}: {message}")]
    Render { index: usize, message: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("view {view}: {source}")]
    View {
        view: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn in_view(self, view: usize) -> Self {
        Error::View {
            view,
            source: Box::new(self),
        }
    }
}
