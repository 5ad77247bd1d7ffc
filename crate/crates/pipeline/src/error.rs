use std::fmt;
use std::path::PathBuf;

use shallowdiff_core::CoreError;

#[derive(Debug)]
pub enum PipelineError {
    /// Bad config key, value or command-line usage.
    Config(String),
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// A file exists but does not parse.
    Format {
        path: PathBuf,
        reason: String,
    },
    Missing(String),
    Core(CoreError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit status: 2 for numerical divergence, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Core(CoreError::Divergence(_)) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(msg) => write!(f, "config error: {msg}"),
            Self::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Self::Format { path, reason } => write!(f, "{}: {reason}", path.display()),
            Self::Missing(what) => write!(f, "missing {what}"),
            Self::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io { source, .. } => Some(source),
            Self::Core(e) => Some(e),
            _ => None,
        }
    }
}

impl From<CoreError> for PipelineError {
    fn from(e: CoreError) -> Self {
        Self::Core(e)
    }
}
