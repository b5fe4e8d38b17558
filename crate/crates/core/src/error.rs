use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DrrfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DrrfError {
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("all weights are zero")]
    DegenerateWeights,

    #[error("objective is unbounded below along coordinate {coordinate}")]
    Unbounded { coordinate: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("nuisance fit failed at first-half row {index}: {source}")]
    NuisanceFit {
        index: usize,
        #[source]
        source: Box<DrrfError>,
    },

    #[error("incompatible model file: found version {found}, expected {expected}")]
    Incompatible { found: u64, expected: u64 },

    #[error("model file integrity error: {0}")]
    Integrity(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DrrfError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DrrfError::Io {
            path: path.into(),
            source,
        }
    }
}
