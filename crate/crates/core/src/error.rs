use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HcscError>;

#[derive(Debug, Error)]
pub enum HcscError {
    /// A user-supplied configuration violates its invariants.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition (shape mismatch, wrong level, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite activation in layer {layer}: {detail}")]
    NonFinite { layer: usize, detail: String },

    #[error("non-finite loss at step {step}, query {query}\n{dump}")]
    NonFiniteLoss { step: u64, query: usize, dump: String },

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HcscError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        Self::Format {
            offset,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
