//! Domain types shared by every layer of the cascade.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryId(pub u64);

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub String);

impl SessionId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A user question as routed through the cascade.
///
/// The text is kept byte-for-byte as submitted: the fixed KV-cache matches on
/// exact bytes, so no trimming or case folding happens here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: QueryId,
    pub text: String,
    pub session_id: SessionId,
    /// Monotonic timestamp in nanoseconds.
    pub issued_at: u64,
}

impl Query {
    pub fn new(id: QueryId, text: impl Into<String>, session_id: SessionId, issued_at: u64) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::EmptyQuery);
        }
        Ok(Self {
            id,
            text,
            session_id,
            issued_at,
        })
    }
}

static NEXT_QUERY_ID: AtomicU64 = AtomicU64::new(1);

/// Builds a [`Query`] with a process-unique id and a monotonic timestamp.
pub fn validate_query(raw_text: &str, session_id: &SessionId) -> Result<Query> {
    let id = QueryId(NEXT_QUERY_ID.fetch_add(1, Ordering::Relaxed));
    Query::new(id, raw_text, session_id.clone(), MonotonicClock.now_ns())
}

/// The five layers, in routing precedence order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerTag {
    FixedKv,
    SemanticCache,
    MemoryRecall,
    AdaptiveMemory,
    NaiveRag,
}

impl LayerTag {
    pub const ALL: [LayerTag; 5] = [
        LayerTag::FixedKv,
        LayerTag::SemanticCache,
        LayerTag::MemoryRecall,
        LayerTag::AdaptiveMemory,
        LayerTag::NaiveRag,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerTag::FixedKv => "fixed_kv",
            LayerTag::SemanticCache => "semantic_cache",
            LayerTag::MemoryRecall => "memory_recall",
            LayerTag::AdaptiveMemory => "adaptive_memory",
            LayerTag::NaiveRag => "naive_rag",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Cache layers answer from stored question/answer pairs.
    pub fn is_cache(self) -> bool {
        matches!(self, LayerTag::FixedKv | LayerTag::SemanticCache)
    }

    /// Layers whose answers are generated from retrieved passages.
    pub fn is_context_generated(self) -> bool {
        matches!(self, LayerTag::AdaptiveMemory | LayerTag::NaiveRag)
    }
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LayerTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerTag::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown layer `{s}`")))
    }
}

/// Result of probing one layer for one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOutcome {
    Hit,
    Miss,
    /// An answer was produced but failed its confidence check.
    Rejected,
}

/// How the workload simulator produced a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryOrigin {
    Fresh,
    ExactReplay,
    PerturbedReplay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
    pub source: String,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub text: String,
    pub layer: LayerTag,
    pub confidence: f64,
    pub supporting_passage_ids: Vec<String>,
    pub latency_seconds: f64,
}

impl AnswerRecord {
    /// Checks the record invariants: confidence range, non-negative latency,
    /// and passages present exactly for context-generated layers.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Config(format!("confidence {} outside [0, 1]", self.confidence)));
        }
        if !(self.latency_seconds >= 0.0) {
            return Err(Error::Config(format!("negative latency {}", self.latency_seconds)));
        }
        if self.layer.is_context_generated() == self.supporting_passage_ids.is_empty() {
            return Err(Error::Config(format!(
                "layer {} with {} supporting passages",
                self.layer,
                self.supporting_passage_ids.len()
            )));
        }
        Ok(())
    }

    /// The same answer re-tagged as served by a cache layer.
    pub(crate) fn served_from(&self, layer: LayerTag) -> Self {
        Self {
            text: self.text.clone(),
            layer,
            confidence: self.confidence,
            supporting_passage_ids: Vec::new(),
            latency_seconds: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingTriple {
    pub question: String,
    pub context: String,
    pub answer: String,
}

impl TrainingTriple {
    pub fn new(question: String, context: String, answer: String) -> Result<Self> {
        if question.is_empty() || context.is_empty() || answer.is_empty() {
            return Err(Error::Config("training triple fields must be non-empty".into()));
        }
        Ok(Self {
            question,
            context,
            answer,
        })
    }
}

/// Source of monotonic nanosecond timestamps.
pub trait Clock: Send + Sync {
    fn now_ns(&self) -> u64;
}

/// Nanoseconds since the first call in this process.
#[derive(Debug, Default, Clone, Copy)]
pub struct MonotonicClock;

impl Clock for MonotonicClock {
    fn now_ns(&self) -> u64 {
        static ANCHOR: OnceLock<Instant> = OnceLock::new();
        ANCHOR.get_or_init(Instant::now).elapsed().as_nanos() as u64
    }
}

/// A clock that only moves when told to; used for reproducible simulation traces.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ns: u64) -> Self {
        Self(AtomicU64::new(start_ns))
    }

    pub fn advance_secs(&self, seconds: f64) {
        let ns = (seconds.max(0.0) * 1e9).round() as u64;
        self.0.fetch_add(ns, Ordering::Relaxed);
    }

    pub fn reset(&self, ns: u64) {
        self.0.store(ns, Ordering::Relaxed);
    }
}

impl Clock for ManualClock {
    fn now_ns(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}
