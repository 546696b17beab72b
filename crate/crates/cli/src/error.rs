use std::io;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dualrec::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown variant `{name}`; known variants: {known}")]
    UnknownVariant { name: String, known: String },

    #[error("gradient check failed for: {0}")]
    GradcheckFailed(String),

    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 0 success, 1 contract or configuration error, 2 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => e.exit_code(),
            CliError::GradcheckFailed(_) => 2,
            _ => 1,
        }
    }

    pub fn io(path: &std::path::Path, source: io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
