use std::fmt;

use thiserror::Error;

/// Identifier of a client (network node). Ids are 1-based, matching node labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl ClientId {
    /// Zero-based position of this client in per-client vectors.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(index: usize) -> Self {
        ClientId(index as u32 + 1)
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum SabreError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("covariance is not positive definite (eigenvalue {eigenvalue:e})")]
    Degenerate { eigenvalue: f64 },

    #[error("unknown client {0}")]
    UnknownClient(ClientId),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("invariant breach at client {client}, joint tick {tick}: {detail}")]
    InvariantBreach {
        client: ClientId,
        tick: u64,
        detail: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl SabreError {
    pub fn config(msg: impl Into<String>) -> Self {
        SabreError::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, SabreError>;
