use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid curvature {0}: must be a positive finite real")]
    InvalidCurvature(f64),

    #[error("point outside the Poincare ball: squared norm {sq_norm:.6e} >= 1/c = {limit:.6e}")]
    OutsideBall { sq_norm: f64, limit: f64 },

    #[error("non-finite coordinate at index {0}")]
    NonFinite(usize),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("curvature mismatch: {left} vs {right}")]
    CurvatureMismatch { left: f64, right: f64 },

    #[error("gradient undefined: the two points coincide")]
    CoincidentPoints,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid hierarchy: {0}")]
    Hierarchy(String),

    #[error("unknown node id '{0}'")]
    UnknownNode(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("scores must contain at least one sample of each class (got {n_id} ID, {n_ood} OOD)")]
    SingleClassScores { n_id: usize, n_ood: usize },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
