//! A five-layer query-routing cascade for retrieval-augmented question
//! answering.
//!
//! Queries are probed, in order, against a fixed KV-cache, a semantic cache,
//! a memory-recall step on the generation backend, an adaptive knowledge
//! memory and full retrieval over the main knowledge base. The first
//! answering layer wins and its answer is written through to both caches.
//!
//! Besides the [`router`], the crate has a workload [`simulator`] and a
//! [`metrics`] engine for cost, throughput, warm-up and latency reports.

pub mod cache;
pub mod embedding;
pub mod error;
pub mod index;
pub mod jsonl;
pub mod knowledge;
pub mod llm;
pub mod metrics;
pub mod model;
pub mod router;
pub mod simulator;

pub use cache::{CacheStats, CachedAnswer, FixedKvCache, SemanticCache};
pub use embedding::{cosine, Embedder, EmbeddingVector, HashEmbedder, RemoteEmbedder, EMBEDDING_DIM};
pub use error::{Error, Result};
pub use index::{FlatIndex, SearchHit, Snapshot};
pub use knowledge::{AdaptiveKnowledgeMemory, CorpusLine, MainKnowledgeBase, ScoredPassage};
pub use llm::{GenerationBackend, RemoteBackend, StubBackend, StubKnowledgeTable};
pub use metrics::{LayerCostModel, PerLayer, SyntheticLatencyModel, UsageRatios};
pub use model::{AnswerRecord, LayerOutcome, LayerTag, Query, QueryId, QueryOrigin, SessionId, TrainingTriple};
pub use router::{export_triples, PentaRag, RouteTraceEvent, RouterConfig, TraceRecord};
pub use simulator::{run_simulation, Dataset, SessionLog, SimulationConfig, SimulationSystem};
