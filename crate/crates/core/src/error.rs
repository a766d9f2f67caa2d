//! Error type shared by every module of the simulator.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0} is not supported for this model kind")]
    Unsupported(&'static str),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("class {class} has {available} samples but {requested} clients selected it; lower the number of clients")]
    InsufficientClassSamples {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("non-finite objective ({})", location(*round, *client, *step))]
    NonFinite {
        round: Option<usize>,
        client: Option<usize>,
        step: usize,
    },

    #[error("all client Jacobians are zero; training has converged")]
    Converged,

    #[error("internal consistency: {0}")]
    Internal(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Attaches round and client coordinates to a non-finite training error.
    pub fn at(self, round: usize, client: usize) -> Self {
        match self {
            Error::NonFinite { step, .. } => Error::NonFinite {
                round: Some(round),
                client: Some(client),
                step,
            },
            other => other,
        }
    }
}

fn location(round: Option<usize>, client: Option<usize>, step: usize) -> String {
    let mut parts = Vec::new();
    if let Some(r) = round {
        parts.push(format!("round {r}"));
    }
    if let Some(c) = client {
        parts.push(format!("client {c}"));
    }
    parts.push(format!("step {step}"));
    parts.join(", ")
}
