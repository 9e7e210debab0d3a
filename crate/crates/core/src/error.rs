use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file for `{id}`: {path}")]
    MissingFile { id: String, path: PathBuf },
    #[error("dimension mismatch for `{id}`: image {image_w}x{image_h}, mask {mask_w}x{mask_h}")]
    DimensionMismatch {
        id: String,
        image_w: u32,
        image_h: u32,
        mask_w: u32,
        mask_h: u32,
    },
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("invalid mask pixel value {value} at ({x}, {y})")]
    InvalidPixelValue { value: u8, x: u32, y: u32 },
    #[error("unsupported raster format: {0}")]
    UnsupportedFormat(String),
    #[error("failed to decode image: {0}")]
    DecodeFailure(String),
    #[error("foundation model adapter unavailable: {0}")]
    AdapterUnavailable(String),
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("corrupt cache entry {path}: {reason}")]
    CorruptEntry { path: PathBuf, reason: String },
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("empty proposal list")]
    EmptyList,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("budget {requested} exceeds the {available} available training ids")]
    BudgetTooLarge { requested: usize, available: usize },
    #[error("no embedding available for sample `{0}`")]
    MissingEmbedding(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("no ground-truth mask for sample `{0}`")]
    MissingGroundTruth(String),
    #[error("unknown sample `{0}`")]
    UnknownSample(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
