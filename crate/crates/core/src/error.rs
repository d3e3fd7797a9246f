use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("masked_softmax: row {row} has no unmasked entries")]
    DegenerateRow { row: usize },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward called on a tensor that is not connected to any trainable leaf")]
    Detached,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("{op}: empty input")]
    Empty { op: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid division: {0}")]
    InvalidDivision(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("function under gradient check is not deterministic (f(x) = {first} then {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("encoder layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Innermost error, looking through layer context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Layer { source, .. } => source.root(),
            e => e,
        }
    }
}
