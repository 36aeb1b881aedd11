use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum CimlError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("view {view}: {message}")]
    View { view: usize, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CimlError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CimlError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn view(view: usize, message: impl Into<String>) -> Self {
        CimlError::View {
            view,
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            CimlError::Config(_) => 2,
            CimlError::Data(_) | CimlError::View { .. } | CimlError::Shape(_) => 3,
            CimlError::NonFinite(_) => 4,
            CimlError::Io { .. } => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, CimlError>;
