//! Feature files, annotations, checkpoints, on-disk datasets and the
//! planted-ground-truth synthetic generator.

mod annotations;
mod checkpoint;
mod dataset;
mod features;
mod synthetic;

pub use annotations::{
    load_annotations, n_clips, parse_annotations, write_annotations, Annotation, Window,
};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, OptimizerSnapshot, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use dataset::{load_dataset, write_dataset, Dataset, Manifest, Sample};
pub use features::{
    decode_features, encode_features, read_feature_file, write_feature_file, FeatureSequence,
    QueryTokens, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload")]
    Truncated,
    #[error("trailing bytes after payload")]
    TrailingBytes,
    #[error("non-finite feature value at index {0}")]
    NonFinite(usize),
    #[error("line {line}: {message}")]
    Annotation { line: usize, message: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("shape mismatch for {name}: checkpoint {stored:?}, model {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
    let path = path.into();
    move |source| DataError::Io { path, source }
}
