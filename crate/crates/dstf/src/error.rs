//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("layer {layer}: expected input shape {expected:?}, got {actual:?}")]
    LayerShapeMismatch {
        layer: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("layer {layer}: {reason}")]
    InvalidLayer { layer: usize, reason: String },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("missing activation cache entry for layer {layer}")]
    MissingCacheEntry { layer: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid regularizer: {0}")]
    InvalidRegularizer(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no prunable weights in network")]
    EmptyWeightSet,

    #[error("idx file has bad magic: expected {expected:#010x}, found {found:#010x}")]
    IdxBadMagic { expected: u32, found: u32 },

    #[error("idx file truncated: needed {needed} bytes, only {available} available")]
    IdxTruncated { needed: usize, available: usize },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("checkpoint has bad magic")]
    CkptBadMagic,

    #[error("unsupported checkpoint version {found:?}")]
    CkptVersion { found: String },

    #[error("checkpoint truncated: needed {needed} bytes, only {available} available")]
    CkptTruncated { needed: usize, available: usize },

    #[error("checkpoint shape inconsistency: {0}")]
    CkptShape(String),

    #[error("checkpoint invariant violated: {0}")]
    CkptInvariant(String),

    #[error("checkpoint descriptor: {0}")]
    CkptDescriptor(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn stage(stage: &'static str, source: Error) -> Error {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}
