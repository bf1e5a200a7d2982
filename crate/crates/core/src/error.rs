use thiserror::Error;

pub type Result<T> = std::result::Result<T, FedError>;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("rank error: requested rank {rank} for a {rows}x{cols} matrix")]
    Rank { rank: usize, rows: usize, cols: usize },

    #[error("numeric error: SVD did not converge after {iterations} sweeps")]
    Numeric { iterations: usize },

    #[error("input error: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("schedule error: step {step} exceeds the budget of {total} steps")]
    Schedule { step: u64, total: u64 },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("framing error: {0}")]
    Framing(String),

    #[error("identity error: {0}")]
    Identity(String),

    #[error("ledger error at entry {index}: {reason}")]
    Ledger { index: usize, reason: String },

    #[error("connection error with client {client_id:?}: {reason}")]
    Connection { client_id: Option<u32>, reason: String },

    #[error("round {round} failed: no verified updates")]
    RoundFailed {
        round: u32,
        partial: Box<crate::proto::ExperimentResult>,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<FedError>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl FedError {
    pub fn context(self, context: impl Into<String>) -> Self {
        FedError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Strips any [`FedError::Context`] wrappers.
    pub fn root(&self) -> &FedError {
        match self {
            FedError::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
