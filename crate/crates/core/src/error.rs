use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column `{column}`")]
    MissingColumn { column: String },

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("encoding error: unseen level `{level}` in covariate `{column}`")]
    UnseenLevel { column: String, level: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameters: {}", .0.join("; "))]
    InvalidParameters(Vec<String>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(
        "covariance not positive definite after jitter retries \
         (variance={}, length_scale={}, noise={})", .0[0], .0[1], .0[2]
    )]
    NotPositiveDefinite([f64; 3]),

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("time {time} outside the prediction window [{lower}, {upper}]")]
    Extrapolation { time: f64, lower: f64, upper: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
