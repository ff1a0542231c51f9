use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter set violates one of its invariants. `field` is the dotted
    /// config path when known.
    #[error("invalid configuration at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("point is behind the camera (depth {depth} mm)")]
    BehindCamera { depth: f64 },

    #[error("non-positive disparity {0} px")]
    NonPositiveDisparity(f64),

    #[error("aim angles ({theta_x:.4}, {theta_y:.4}) rad exceed field limit {limit} rad")]
    OutOfField {
        theta_x: f64,
        theta_y: f64,
        limit: f64,
    },

    #[error("track {0} has insufficient history for prediction")]
    NotReady(u64),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 for configuration problems, 3 for
    /// everything that goes wrong at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Parse { .. } => 2,
            _ => 3,
        }
    }
}
