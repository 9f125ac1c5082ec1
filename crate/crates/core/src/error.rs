use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to an operation's shape rule.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Input outside an operation's mathematical domain.
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    /// Violated precondition of an API call.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid model or run configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            msg: msg.into(),
        }
    }
}
