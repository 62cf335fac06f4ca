use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Compressive prestress exceeds the first-mode buckling load.
    #[error(
        "membrane buckles: tension {tension:.4e} N/m at or below critical {critical:.4e} N/m \
         (thickness {thickness:.4e} m, stress {stress:.4e} Pa)"
    )]
    Buckling {
        thickness: f64,
        stress: f64,
        tension: f64,
        critical: f64,
    },

    #[error("invalid domain: {0}")]
    Domain(String),

    #[error("rank-deficient design matrix for combination {combo} at degree {degree}")]
    RankDeficient { combo: usize, degree: u32 },

    #[error("surrogate/config mismatch: {0}")]
    Mismatch(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot parse quantity {input:?}: {reason}")]
    Quantity { input: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}:{column}: {message}")]
    Json {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, err: &serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}
