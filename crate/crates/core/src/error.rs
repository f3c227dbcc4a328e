use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value at {0}")]
    NonFinite(&'static str),

    #[error("invalid axis {axis} for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape already consumed by backward")]
    TapeConsumed,

    #[error("function is not deterministic: f(x) evaluated to {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("grid mismatch: expected {expected:?}, got {actual:?}")]
    GridMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("benchmark: {0}")]
    Bench(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
