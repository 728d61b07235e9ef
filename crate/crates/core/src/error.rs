use thiserror::Error;

/// Errors produced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error in {field}: {reason}")]
    Format { field: String, reason: String },

    #[error(
        "partition infeasible: {reason} (samples={samples}, majority samples={majority_samples}, \
         clients={client_count}, shard clients={shard_clients})"
    )]
    PartitionInfeasible {
        reason: String,
        samples: usize,
        majority_samples: usize,
        client_count: usize,
        shard_clients: usize,
    },

    #[error("degenerate (zero) weight vector for client {client} under cosine similarity")]
    DegenerateVector { client: usize },

    #[error("insufficient alive clients: {alive} alive, {needed} needed")]
    InsufficientClients { alive: usize, needed: usize },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("comparison invalid: {0}")]
    ComparisonInvalid(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
