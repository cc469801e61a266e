use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} (bound {bound})")]
    Index {
        what: &'static str,
        index: i64,
        bound: usize,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("empty loss: every target position is ignored")]
    EmptyLoss,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("sequencing error: expected shadow cursor {expected}, got {got}")]
    Sequencing { expected: usize, got: usize },

    #[error("pooling error: row {row} has no unpadded positions")]
    Pooling { row: usize },

    #[error("budget error: {0}")]
    Budget(String),

    #[error("non-finite gradient for tensor `{name}` at element {index}")]
    NanGradient { name: String, index: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("unknown parameter `{0}`")]
    MissingParam(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("mode mismatch: {0}")]
    Mode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
