use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("empty group: {0}")]
    EmptyGroup(String),

    #[error("missing prerequisite artifact: {0}")]
    Prerequisite(String),

    #[error("{phase} aborted at round {round}: {detail}")]
    Diverged {
        phase: String,
        round: usize,
        detail: String,
    },

    #[error("{}:{line}: {reason}", path.display())]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("io error on {}: {source}", path.display())]
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

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation { .. } | Error::Parse { .. } | Error::Shape { .. } => 2,
            Error::EmptyGroup(_) => 2,
            Error::Prerequisite(_) => 3,
            Error::NonFinite { .. } | Error::Diverged { .. } => 4,
            Error::Io { .. } | Error::Json(_) | Error::Csv(_) => 1,
        }
    }
}
