use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{what} index {index} out of range [0, {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite output from {op} on finite inputs")]
    NonFinite { op: &'static str },

    #[error("backward already ran on this graph; build a new graph for the next pass")]
    DoubleBackward,

    #[error("activation budget {budget} is below the minimum feasible total {min_total}")]
    InfeasibleBudget { budget: usize, min_total: usize },

    #[error("non-finite loss or gradient norm ({loss}) at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("expert {expert} has a zero-norm gating vector")]
    ZeroNormRow { expert: usize },

    #[error("trace mismatch: {0}")]
    TraceMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
