//! Generation backends: context generation for layers 4/5 and
//! confidence-gated memory recall for layer 3.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::knowledge::ScoredPassage;
use crate::model::{AnswerRecord, LayerTag, TrainingTriple};

pub const DEFAULT_RECALL_THRESHOLD: f64 = 0.5;

/// Raw backend output before it becomes an [`AnswerRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub answer: String,
    #[serde(default)]
    pub confidence: f64,
}

pub trait GenerationBackend: Send + Sync {
    fn generate_with_context(&self, query: &str, passages: &[ScoredPassage]) -> Result<Generation>;

    /// Answers from the model's own knowledge with a self-reported confidence.
    fn recall(&self, query: &str) -> Result<Generation>;
}

/// Runs context generation and tags the result with `layer`.
pub fn generate_with_context(
    backend: &dyn GenerationBackend,
    query: &str,
    passages: &[ScoredPassage],
    layer: LayerTag,
) -> Result<AnswerRecord> {
    if passages.is_empty() {
        return Err(Error::EmptyContext);
    }
    let g = backend.generate_with_context(query, passages)?;
    Ok(AnswerRecord {
        text: g.answer,
        layer,
        confidence: g.confidence.clamp(0.0, 1.0),
        supporting_passage_ids: passages.iter().map(|p| p.passage.id.clone()).collect(),
        latency_seconds: 0.0,
    })
}

/// The recall answer if its confidence reaches `recall_threshold`, else `None`.
pub fn memory_recall(backend: &dyn GenerationBackend, query: &str, recall_threshold: f64) -> Result<Option<AnswerRecord>> {
    if !(0.0..=1.0).contains(&recall_threshold) {
        return Err(Error::Config(format!("recall threshold {recall_threshold} outside [0, 1]")));
    }
    let g = backend.recall(query)?;
    let confidence = g.confidence.clamp(0.0, 1.0);
    if confidence < recall_threshold {
        return Ok(None);
    }
    Ok(Some(AnswerRecord {
        text: g.answer,
        layer: LayerTag::MemoryRecall,
        confidence,
        supporting_passage_ids: Vec::new(),
        latency_seconds: 0.0,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownAnswer {
    pub answer: String,
    pub confidence: f64,
}

/// Question text to answer, standing in for what a model has memorized.
/// Keys are exact question strings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StubKnowledgeTable {
    entries: HashMap<String, KnownAnswer>,
}

impl StubKnowledgeTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, question: impl Into<String>, answer: impl Into<String>, confidence: f64) {
        self.entries.insert(
            question.into(),
            KnownAnswer {
                answer: answer.into(),
                confidence: confidence.clamp(0.0, 1.0),
            },
        );
    }

    pub fn get(&self, question: &str) -> Option<&KnownAnswer> {
        self.entries.get(question)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Absorbs exported triples; every question becomes recallable at `confidence`.
    pub fn absorb(&mut self, triples: &[TrainingTriple], confidence: f64) {
        for t in triples {
            self.insert(t.question.clone(), t.answer.clone(), confidence);
        }
    }

    pub fn from_triples_file(path: &Path, confidence: f64, lenient: bool) -> Result<Self> {
        let triples: Vec<TrainingTriple> = jsonl::read_jsonl_file(path, lenient)?;
        let mut table = Self::new();
        table.absorb(&triples, confidence);
        Ok(table)
    }
}

/// Confidence the stub reports for answers read from an annotated passage.
pub const STUB_ANNOTATED_CONFIDENCE: f64 = 0.9;
/// Confidence the stub reports when it falls back to the passage's first sentence.
pub const STUB_EXTRACTIVE_CONFIDENCE: f64 = 0.6;
/// Confidence assigned to questions learned from exported triples.
pub const STUB_LEARNED_CONFIDENCE: f64 = 0.9;

/// Deterministic offline backend.
///
/// Context generation returns the answer annotation of the top-ranked passage,
/// or that passage's first sentence when it carries none. Recall looks the
/// question up in a [`StubKnowledgeTable`] and reports confidence 0 for
/// unknown questions.
#[derive(Debug, Default)]
pub struct StubBackend {
    table: RwLock<StubKnowledgeTable>,
    context_calls: AtomicU64,
    recall_calls: AtomicU64,
}

impl StubBackend {
    pub fn new(table: StubKnowledgeTable) -> Self {
        Self {
            table: RwLock::new(table),
            ..Default::default()
        }
    }

    pub fn absorb(&self, triples: &[TrainingTriple], confidence: f64) {
        self.table.write().absorb(triples, confidence);
    }

    pub fn replace_table(&self, table: StubKnowledgeTable) {
        *self.table.write() = table;
    }

    pub fn table_len(&self) -> usize {
        self.table.read().len()
    }

    pub fn context_calls(&self) -> u64 {
        self.context_calls.load(Ordering::Relaxed)
    }

    pub fn recall_calls(&self) -> u64 {
        self.recall_calls.load(Ordering::Relaxed)
    }

    pub fn total_calls(&self) -> u64 {
        self.context_calls() + self.recall_calls()
    }
}

fn first_sentence(text: &str) -> &str {
    let end = text
        .char_indices()
        .find(|&(_, c)| matches!(c, '.' | '!' | '?'))
        .map_or(text.len(), |(i, c)| i + c.len_utf8());
    text[..end].trim()
}

impl GenerationBackend for StubBackend {
    fn generate_with_context(&self, _query: &str, passages: &[ScoredPassage]) -> Result<Generation> {
        self.context_calls.fetch_add(1, Ordering::Relaxed);
        let top = passages.first().ok_or(Error::EmptyContext)?;
        Ok(match &top.answer {
            Some(a) => Generation {
                answer: a.clone(),
                confidence: STUB_ANNOTATED_CONFIDENCE,
            },
            None => Generation {
                answer: first_sentence(&top.passage.text).to_owned(),
                confidence: STUB_EXTRACTIVE_CONFIDENCE,
            },
        })
    }

    fn recall(&self, query: &str) -> Result<Generation> {
        self.recall_calls.fetch_add(1, Ordering::Relaxed);
        Ok(match self.table.read().get(query) {
            Some(k) => Generation {
                answer: k.answer.clone(),
                confidence: k.confidence,
            },
            None => Generation {
                answer: String::new(),
                confidence: 0.0,
            },
        })
    }
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    mode: &'a str,
    query: &'a str,
    passages: Vec<&'a str>,
}

/// Counting semaphore bounding in-flight remote calls.
#[derive(Debug)]
struct InFlight {
    used: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock();
        while *used >= self.cap {
            self.freed.wait(&mut used);
        }
        *used += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock() -= 1;
        self.0.freed.notify_one();
    }
}

/// Client for an external generation service speaking
/// `POST {"mode", "query", "passages"}` -> `{"answer", "confidence"}`.
/// A response without a confidence counts as 0, which always fails the
/// recall gate.
pub struct RemoteBackend {
    endpoint: String,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, max_in_flight: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
            in_flight: InFlight {
                used: Mutex::new(0),
                freed: Condvar::new(),
                cap: max_in_flight.max(1),
            },
        }
    }

    fn call(&self, request: RemoteRequest<'_>) -> Result<Generation> {
        let _slot = self.in_flight.acquire();
        let unavailable = |e: ureq::Error| Error::BackendUnavailable(e.to_string());
        self.agent
            .post(&self.endpoint)
            .send_json(&request)
            .map_err(unavailable)?
            .body_mut()
            .read_json::<Generation>()
            .map_err(unavailable)
    }
}

impl GenerationBackend for RemoteBackend {
    fn generate_with_context(&self, query: &str, passages: &[ScoredPassage]) -> Result<Generation> {
        self.call(RemoteRequest {
            mode: "context",
            query,
            passages: passages.iter().map(|p| p.passage.text.as_str()).collect(),
        })
    }

    fn recall(&self, query: &str) -> Result<Generation> {
        self.call(RemoteRequest {
            mode: "recall",
            query,
            passages: Vec::new(),
        })
    }
}
