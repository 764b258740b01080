use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema violation in {path}: field `{field}`: {message}")]
    Schema {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error("manifest {split} count mismatch: declared {declared}, annotations sum to {actual}")]
    CountMismatch {
        split: &'static str,
        declared: u64,
        actual: u64,
    },

    #[error("{path}: annotation {index} ({x}, {y}) lies outside the {width}x{height} image")]
    PointOutOfBounds {
        path: PathBuf,
        index: usize,
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },

    #[error("{path}:{line}: malformed annotation row {row:?}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        row: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (batch samples {samples:?}): total={total}, low={low}, high={high}")]
    NonFiniteLoss {
        step: usize,
        samples: Vec<usize>,
        total: f64,
        low: f64,
        high: f64,
    },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
