use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or row counts that do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("parse error in {path} at row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    /// An index, count, or size outside its admissible range.
    #[error("out of bounds: {0}")]
    Bounds(String),

    /// A precondition that the caller was responsible for.
    #[error("contract violated: {0}")]
    Contract(String),

    /// Training produced NaN or infinity.
    #[error("non-finite value in {term}: {context}")]
    NonFinite { term: String, context: String },

    #[error("domain error: {0}")]
    Domain(String),

    /// KL divergence is infinite because q puts mass where p has none.
    #[error("infinite divergence: q has mass at cell ({row}, {col}) where p is zero")]
    InfiniteDivergence { row: usize, col: usize },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
