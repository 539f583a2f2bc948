use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("attention stack has no layers or heads")]
    EmptyStack,
    #[error("prompt block has no rows")]
    EmptyPrompt,
    #[error("generated-text block has no rows")]
    EmptyGeneration,
    #[error("step confidences sum to zero")]
    ZeroConfidence,
    #[error("pooled attention sums to zero; stack is malformed")]
    DegenerateAttention,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid attention stack: {0}")]
    InvalidStack(String),
    #[error("not a simplex vector: {0}")]
    NotSimplex(String),
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("activation cache does not match parameters: {0}")]
    StaleCache(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training loss diverged at epoch {epoch}: {value}")]
    DivergedLoss { epoch: usize, value: f64 },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
