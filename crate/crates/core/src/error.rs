use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes shared by every module.
///
/// The CLI maps [`Error::kind`] onto process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("insufficient history: need samples at t={needed:.3}s")]
    InsufficientHistory { needed: f64 },

    #[error("no neighbors: SVO requires at least one neighbor delta")]
    NoNeighbors,

    #[error("insufficient class data: class {class} has {count} samples (need at least 2)")]
    InsufficientClassData { class: &'static str, count: usize },

    #[error("empty evaluation: at least one episode is required")]
    EmptyEvaluation,

    #[error("data error at {path}:{line}: {message}")]
    Data {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse error category, stable across releases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Schema(_) | Error::InsufficientClassData { .. } => {
                ErrorKind::Config
            }
            Error::Data { .. } | Error::Json(_) | Error::Csv(_) | Error::Io { .. } => {
                ErrorKind::Data
            }
            Error::Usage(_)
            | Error::InsufficientHistory { .. }
            | Error::NoNeighbors
            | Error::EmptyEvaluation => ErrorKind::Runtime,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
