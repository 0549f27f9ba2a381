use std::path::PathBuf;

use crate::features::DescriptorKind;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to read image {path}: {source}")]
    ImageRead {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("image has a zero dimension")]
    EmptyImage,
    #[error("plane dimensions {width}x{height} do not match data length {len}")]
    PlaneShape { width: usize, height: usize, len: usize },
    #[error("median window must be odd and positive, got {0}")]
    MedianWindow(usize),
    #[error("image {width}x{height} is smaller than one {block}x{block} block")]
    ImageTooSmall { width: usize, height: usize, block: usize },
    #[error("no {0} descriptors could be extracted")]
    NoDescriptors(DescriptorKind),
    #[error("descriptor kind mismatch: expected {expected}, found {found}")]
    KindMismatch {
        expected: DescriptorKind,
        found: DescriptorKind,
    },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("need at least {needed} features, have {available}")]
    InsufficientFeatures { needed: usize, available: usize },
    #[error("non-finite value in input data")]
    NonFinite,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("training data contains a single class")]
    SingleClass,
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("artifact integrity check failed: {0}")]
    Integrity(String),
    #[error("unsupported format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
