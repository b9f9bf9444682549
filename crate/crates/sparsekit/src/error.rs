use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid recipe key `{key}`: {reason}")]
    Recipe { key: String, reason: String },
    #[error(transparent)]
    Core(#[from] sparsekit_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> AppError {
        let path = path.into();
        move |source| AppError::Io { path, source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> AppError {
        AppError::Format { path: path.into(), reason: reason.into() }
    }

    /// 2 for usage errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AppError::Usage(_) => "usage",
            AppError::Recipe { .. } => "recipe",
            AppError::Core(_) => "domain",
            AppError::Io { .. } => "io",
            AppError::Format { .. } => "format",
            AppError::Locked(_) => "locked",
        }
    }

    /// One line: `sparsekit-error kind=<kind> key=<key> message=<json string>`.
    pub fn machine_line(&self) -> String {
        let key = match self {
            AppError::Recipe { key, .. } => key.clone(),
            AppError::Io { path, .. } | AppError::Format { path, .. } | AppError::Locked(path) => path.display().to_string(),
            _ => "-".into(),
        };
        let key = if key.is_empty() || key.contains(char::is_whitespace) { serde_json::to_string(&key).expect("string") } else { key };
        format!("sparsekit-error kind={} key={} message={}", self.kind(), key, serde_json::to_string(&self.to_string()).expect("string"))
    }
}
