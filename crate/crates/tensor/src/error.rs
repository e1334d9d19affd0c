use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {dims:?}: {detail}")]
    Shape {
        op: &'static str,
        dims: Vec<Vec<usize>>,
        detail: String,
    },

    #[error("unknown op kind `{0}`")]
    UnknownOp(String),

    #[error("op `{op}`: missing or invalid attribute `{attr}`")]
    BadAttr { op: String, attr: String },

    #[error("backward requires a scalar loss, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("data length {len} does not match dims {dims:?}")]
    DataLength { dims: Vec<usize>, len: usize },

    #[error("discrete choice replay exhausted after {0} entries")]
    ChoiceReplay(usize),

    /// Failure raised by caller code running on top of the graph.
    #[error("{0}")]
    External(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, dims: &[&[usize]], detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        dims: dims.iter().map(|d| d.to_vec()).collect(),
        detail: detail.into(),
    }
}
