use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GcrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GcrError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dims/payload mismatch: dims imply {expected} elements, payload has {actual}")]
    DimsPayloadMismatch { expected: usize, actual: usize },

    #[error("nonpositive dim at axis {axis}")]
    NonpositiveDim { axis: usize },

    #[error("bad magic {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u8),

    #[error("truncated header")]
    TruncatedHeader,

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("anomalous image in train split: {image_id}")]
    AnomalousTrain { image_id: String },

    #[error("mask/image size mismatch for {image_id}: mask {mask:?}, image {image:?}")]
    MaskSizeMismatch {
        image_id: String,
        mask: (usize, usize),
        image: (usize, usize),
    },

    #[error("feature dim mismatch: expected {expected}, found {found}")]
    FeatureDimMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("bank error: {0}")]
    Bank(String),

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl GcrError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GcrError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        GcrError::Json {
            context: context.into(),
            source,
        }
    }
}
