use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error at {location}: {message}")]
    Schema { location: String, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible profile for health area {area}: {message}")]
    Generation { area: String, message: String },

    #[error("health area {area} has no villages to summarize")]
    EmptyArea { area: String },

    #[error("{arm} arm has {available} villages but {requested} are required")]
    Capacity {
        arm: &'static str,
        available: usize,
        requested: usize,
    },

    #[error(
        "no candidate draw met avg SMD <= {threshold} in {attempts} attempts; relax the threshold or add attempts"
    )]
    EmptyPool { threshold: f64, attempts: usize },

    #[error("design matrix is singular (column {column} is linearly dependent)")]
    SingularDesign { column: usize },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("degenerate covariate: {0}")]
    DegenerateCovariate(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error at {path}: {message}")]
    Json { path: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Whether the failure stems from bad user input (exit code 1) rather than
    /// a runtime failure of the numerics or the filesystem (exit code 2).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Schema { .. }
                | Error::Invalid(_)
                | Error::Domain(_)
                | Error::Generation { .. }
                | Error::EmptyArea { .. }
                | Error::Capacity { .. }
                | Error::Csv(_)
                | Error::Json { .. }
                | Error::DegenerateCovariate(_)
        )
    }
}
