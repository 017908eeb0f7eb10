use thiserror::Error;

/// Every failure the library can report.
///
/// The variants follow the error classes the command-line front end maps to
/// exit codes: configuration and usage problems are the caller's fault,
/// everything else is a runtime failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad flags, config or missing inputs.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Usage(_) | Error::Input(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
