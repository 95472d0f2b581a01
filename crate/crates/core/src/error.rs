use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown preset {name:?} (available: {available})")]
    UnknownPreset { name: String, available: String },

    #[error("unsupported element {0:?} (supported: Ga, As, Sr, Ti, O)")]
    UnsupportedElement(String),

    #[error("dense operator limit exceeded: N = {n} > {max}")]
    DenseLimit { n: usize, max: usize },

    #[error("negative intensity {value} at flat index {index}")]
    NegativeIntensity { index: usize, value: f64 },

    #[error("probe never illuminates the grid (max footprint {0:e})")]
    DarkProbe(f64),

    #[error("training diverged at epoch {epoch}, batch {batch}: {what}")]
    Diverged {
        epoch: usize,
        batch: usize,
        what: String,
    },

    #[error("malformed tensor file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
