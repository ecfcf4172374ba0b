use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CurveError {
    /// The length element collapsed below the regularity threshold.
    #[error("degenerate grid: min |f_x| = {min_fx:e} at node {node} (threshold {threshold:e})")]
    DegenerateGrid {
        min_fx: f64,
        node: usize,
        threshold: f64,
    },

    #[error("non-finite value encountered at t = {t}")]
    NonFinite { t: f64 },

    /// Invalid configuration or argument. `path` names the offending field.
    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CurveError {
    pub(crate) fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        CurveError::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CurveError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = CurveError> = std::result::Result<T, E>;
