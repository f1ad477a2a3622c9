use std::path::PathBuf;

/// Errors raised by the estimation, control and simulation layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("information matrix is singular (rank < {needed})")]
    SingularInformation { needed: usize },

    #[error("degenerate measurement weight: sigma={sigma}, plug-in distance={dist}")]
    DegenerateWeight { sigma: f64, dist: f64 },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NonSymmetric { asymmetry: f64 },

    #[error("cost gradient is singular: point within {distance:e} of anchor {anchor}")]
    GradientSingularity { anchor: usize, distance: f64 },

    #[error("reference has zero norm")]
    ZeroReferenceNorm,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
