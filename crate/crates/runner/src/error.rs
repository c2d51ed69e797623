use std::path::PathBuf;

/// Failures of a run, grouped by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] bridge_core::Error),
    #[error("I/O failure on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T, E = RunError> = std::result::Result<T, E>;

impl RunError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RunError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        RunError::Format { path: path.into(), message: message.into() }
    }

    /// 1 for configuration problems, 2 for numerical failures, 3 for I/O and
    /// unreadable files.
    pub fn exit_code(&self) -> i32 {
        use bridge_core::Error as E;
        match self {
            RunError::Config(_) => 1,
            RunError::Core(E::InvalidConfig(_) | E::InvalidSpec(_) | E::ForbiddenPair { .. }) => 1,
            RunError::Core(_) => 2,
            RunError::Io { .. } | RunError::Format { .. } => 3,
        }
    }
}
