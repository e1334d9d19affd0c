use std::path::PathBuf;

use thiserror::Error;
use vrnet_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid extrinsic: {0}")]
    Extrinsic(String),

    #[error("invalid camera: {0}")]
    Camera(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: field `{field}`: {detail}", file.display())]
    Malformed {
        file: PathBuf,
        field: String,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite value at step {step}: first bad tensor is node {node} ({op})")]
    NonFinite { step: usize, node: usize, op: &'static str },

    #[error("unknown adversity mode `{0}`")]
    UnknownAdversity(String),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
