use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported {field} {value}")]
    Unsupported { field: &'static str, value: u32 },
    #[error("dimension overflow: {0}")]
    DimOverflow(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),
    #[error("non-finite value at element {position}")]
    NonFinite { position: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("illegal label {value} at pixel {position}")]
    IllegalLabel { value: u8, position: usize },
    #[error("variance {value} below floor at index {index}")]
    DegenerateCovariance { index: usize, value: f64 },
    #[error("non-finite cost entry at ({row}, {col})")]
    InvalidCost { row: usize, col: usize },
    #[error("class {class} has {found} samples, needs at least {needed}")]
    InsufficientSamples {
        class: usize,
        found: usize,
        needed: usize,
    },
    #[error("every row is ignored")]
    AllIgnored,
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
    #[error("tape does not belong to this network state")]
    StaleTape,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("ranking metric needs both classes (positives={positives}, negatives={negatives})")]
    OneClassOnly { positives: usize, negatives: usize },
    #[error("no labelled pixels to evaluate")]
    NoValidPixels,
    #[error("zero stride")]
    ZeroStride,
    #[error("freeze violation: {0}")]
    FreezeViolation(String),
    #[error("digest mismatch for tensor {name}: manifest {expected}, actual {actual}")]
    DigestMismatch {
        name: String,
        expected: String,
        actual: String,
    },
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate layout: {0}")]
    DegenerateLayout(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
