use crate::model::{LayerOutcome, LayerTag, QueryId};

/// Errors produced anywhere in the routing stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("query text is empty or whitespace-only")]
    EmptyQuery,

    #[error("cannot embed empty input")]
    EmptyInput,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid vector: {0}")]
    InvalidVector(String),

    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),

    #[error("main knowledge base is empty")]
    EmptyKnowledgeBase,

    #[error("context generation requires at least one passage")]
    EmptyContext,

    #[error("generation backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("embedding service unavailable: {0}")]
    EmbedderUnavailable(String),

    #[error("no layer produced an answer for query {query_id}")]
    AllLayersMissed {
        query_id: QueryId,
        layers_probed: Vec<(LayerTag, LayerOutcome)>,
    },

    #[error("usage ratios sum to {sum}, expected 1")]
    RatioMismatch { sum: f64 },

    #[error("elapsed time must be positive")]
    ZeroElapsed,

    #[error("trace is empty")]
    EmptyTrace,

    #[error("no claims to score")]
    NoClaims,

    #[error("supported claims ({supported}) exceed total claims ({total})")]
    ClaimCountMismatch { supported: usize, total: usize },

    #[error("fresh question pool exhausted after {served} questions")]
    PoolExhausted { served: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {detail}")]
    MalformedLine {
        path: String,
        line: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
