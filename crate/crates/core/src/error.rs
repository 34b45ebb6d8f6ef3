use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the domain of an operation (zero quaternion, empty set, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("point lies on the camera plane (depth {depth:e})")]
    PointAtCameraPlane { depth: f64 },

    #[error("degenerate quaternion head output (norm {norm:e})")]
    DegenerateHead { norm: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("data error at line {line}: {message}")]
    Data { line: usize, message: String },

    /// Mismatch between a tape and the model that is asked to consume it.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used by the command line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::PointAtCameraPlane { .. } => "camera-plane",
            Error::DegenerateHead { .. } => "degenerate-head",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Data { .. } => "data",
            Error::Contract(_) => "contract",
            Error::Numerical(_) => "numerical",
            Error::Io { .. } => "io",
        }
    }
}
