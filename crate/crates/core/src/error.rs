use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the quantization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("shape mismatch for `{id}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        id: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite value in weight `{0}`")]
    NonFiniteWeight(String),
    #[error("layer `{0}` has no inferred shapes")]
    ShapeMissing(String),
    #[error("scheme length {got} does not match {expected} quantizable layers")]
    LengthMismatch { expected: usize, got: usize },
    #[error("model has no layers")]
    EmptyModel,
    #[error("evaluation subset is empty")]
    EmptySubset,
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("search space of {size} schemes exceeds cap {cap}")]
    SpaceTooLarge { size: u128, cap: u128 },
    #[error("cannot quantize {k} of {layers} layers")]
    KTooLarge { k: usize, layers: usize },
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(id: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            id: id.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
