use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Violated precondition of an operation (shape mismatch, bad mask, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("semantic error at node `{node}`: {message}")]
    Semantic { node: String, message: String },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// A payload the backward pass needs was not in the activation store.
    #[error("missing payload for node `{node}`: {what}")]
    MissingPayload { node: String, what: String },

    /// Training produced non-finite values that loss scaling could not absorb.
    #[error("training diverged at step {step}: {message}")]
    Diverged { step: u64, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn semantic(node: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Semantic {
            node: node.into(),
            message: msg.into(),
        }
    }
}
