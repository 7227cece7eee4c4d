use std::path::PathBuf;

use thiserror::Error;

use crate::compositing::Placement;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which denoising branch a failure came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Inversion,
    Reconstruction,
    Generation,
    Refiner,
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Branch::Inversion => "inversion",
            Branch::Reconstruction => "branch1",
            Branch::Generation => "branch2",
            Branch::Refiner => "refiner",
        };
        f.write_str(name)
    }
}

/// Errors raised by a learned-component backend.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend contract violated: {0}")]
    Contract(String),
    #[error("worker protocol error: {0}")]
    Protocol(String),
    #[error("worker i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{what} out of range: {detail}")]
    Range { what: &'static str, detail: String },

    #[error("division guard: {0}")]
    DivisionGuard(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("invalid placement: {message} (suggested: x={}, y={}, scale={})", suggestion.x, suggestion.y, suggestion.scale)]
    Placement {
        message: String,
        suggestion: Placement,
    },

    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing backend assets: {}", unresolved.join(", "))]
    MissingAssets { unresolved: Vec<String> },

    #[error("unknown layer `{0}` (not in the backend catalog)")]
    UnknownLayer(String),

    #[error("{0}")]
    Backend(#[from] BackendError),

    #[error("{branch} failed at t={t}: {source}")]
    Step {
        t: usize,
        branch: Branch,
        #[source]
        source: BackendError,
    },

    #[error("manifest error: {}", problems.join("; "))]
    Manifest { problems: Vec<String> },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's inputs rather than by a backend.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. }
                | Error::Placement { .. }
                | Error::Range { .. }
                | Error::Schedule(_)
                | Error::Config(_)
                | Error::UnknownLayer(_)
                | Error::Manifest { .. }
                | Error::Io { .. }
                | Error::Image { .. }
                | Error::Json(_)
        )
    }

    /// Name of the offending request field, when there is one.
    pub fn field(&self) -> Option<&str> {
        match self {
            Error::Validation { field, .. } => Some(field),
            Error::Placement { .. } => Some("placement"),
            _ => None,
        }
    }
}
