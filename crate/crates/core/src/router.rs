//! The five-layer decision cascade.
//!
//! Each query probes, in order, the fixed KV-cache, the semantic cache,
//! memory recall, the adaptive knowledge memory and full retrieval over the
//! main knowledge base. The first layer that produces an accepted answer
//! serves it. The answer is then written through to both caches before
//! `route` returns, and every main-KB search queues its top hits for the
//! adaptive memory.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{writeback, CacheStats, FixedKvCache, SemanticCache, DEFAULT_SEMANTIC_THRESHOLD};
use crate::embedding::{Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::knowledge::{
    AdaptiveKnowledgeMemory, MainKnowledgeBase, SettleMode, DEFAULT_AKM_SEED_K, DEFAULT_AKM_THRESHOLD,
    DEFAULT_RETRIEVAL_K,
};
use crate::llm::{generate_with_context, memory_recall, GenerationBackend, DEFAULT_RECALL_THRESHOLD};
use crate::metrics::{PerLayer, SyntheticLatencyModel};
use crate::model::{
    AnswerRecord, Clock, LayerOutcome, LayerTag, ManualClock, MonotonicClock, Query, QueryId, QueryOrigin,
    SessionId, TrainingTriple,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub semantic_threshold: f64,
    pub akm_threshold: f64,
    pub recall_threshold: f64,
    pub retrieval_k: usize,
    pub akm_seed_k: usize,
    pub deterministic_settle: bool,
    /// Probe memory recall before the adaptive memory (default) or after it.
    pub recall_before_adaptive: bool,
    /// Layers skipped entirely, for ablation runs.
    pub disabled_layers: Vec<LayerTag>,
    /// Optional LRU cap on each cache; unbounded when absent.
    pub cache_max_entries: Option<usize>,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            semantic_threshold: DEFAULT_SEMANTIC_THRESHOLD,
            akm_threshold: DEFAULT_AKM_THRESHOLD,
            recall_threshold: DEFAULT_RECALL_THRESHOLD,
            retrieval_k: DEFAULT_RETRIEVAL_K,
            akm_seed_k: DEFAULT_AKM_SEED_K,
            deterministic_settle: true,
            recall_before_adaptive: true,
            disabled_layers: Vec::new(),
            cache_max_entries: None,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("semantic_threshold", self.semantic_threshold),
            ("akm_threshold", self.akm_threshold),
            ("recall_threshold", self.recall_threshold),
        ] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("{name} {t} outside [0, 1]")));
            }
        }
        if self.semantic_threshold == 0.0 || self.akm_threshold == 0.0 {
            return Err(Error::Config("cache and adaptive-memory thresholds must be positive".into()));
        }
        if self.retrieval_k == 0 {
            return Err(Error::Config("retrieval_k must be at least 1".into()));
        }
        if self.retrieval_k > self.akm_seed_k {
            return Err(Error::Config(format!(
                "retrieval_k ({}) exceeds akm_seed_k ({})",
                self.retrieval_k, self.akm_seed_k
            )));
        }
        Ok(())
    }

    /// Probe order after applying the recall/adaptive ordering and disabled layers.
    pub fn probe_order(&self) -> Vec<LayerTag> {
        let mut order = LayerTag::ALL.to_vec();
        if !self.recall_before_adaptive {
            order.swap(2, 3);
        }
        order.retain(|l| !self.disabled_layers.contains(l));
        order
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerProbe {
    pub layer: LayerTag,
    pub outcome: LayerOutcome,
    pub duration_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteTraceEvent {
    pub query_id: QueryId,
    pub layers_probed: Vec<LayerProbe>,
    pub serving_layer: LayerTag,
    pub latency_seconds: f64,
    /// Monotonic nanoseconds at completion.
    pub timestamp: u64,
}

/// One routed query as persisted in a session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub query: Query,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<QueryOrigin>,
    pub answer: AnswerRecord,
    /// Supporting passage texts in rank order; empty for non-context layers.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context: Vec<String>,
    pub trace: RouteTraceEvent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Routed {
    pub answer: AnswerRecord,
    pub trace: RouteTraceEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterStats {
    pub total_queries: u64,
    pub unanswered: u64,
    pub layer_counts: PerLayer<u64>,
    pub fixed_kv: CacheStats,
    pub semantic_cache: CacheStats,
    pub adaptive_memory_size: usize,
    pub adaptive_memory_hits: u64,
    pub adaptive_memory_misses: u64,
    pub knowledge_base_size: usize,
}

/// Where trace latencies come from.
enum Timing {
    /// Wall-clock probe durations from a monotonic clock.
    Measured,
    /// Modeled probe durations on a virtual clock, for reproducible runs.
    Synthetic {
        model: SyntheticLatencyModel,
        rng: Mutex<ChaCha8Rng>,
        clock: ManualClock,
    },
}

pub struct RouterBuilder {
    config: RouterConfig,
    embedder: Arc<dyn Embedder>,
    backend: Arc<dyn GenerationBackend>,
    kb: Arc<MainKnowledgeBase>,
    synthetic: Option<(SyntheticLatencyModel, u64)>,
}

impl RouterBuilder {
    pub fn config(mut self, config: RouterConfig) -> Self {
        self.config = config;
        self
    }

    /// Replaces measured latencies with the model, seeded for reproducibility.
    pub fn synthetic_latency(mut self, model: SyntheticLatencyModel, seed: u64) -> Self {
        self.synthetic = Some((model, seed));
        self
    }

    pub fn build(self) -> Result<PentaRag> {
        self.config.validate()?;
        let dim = self.embedder.dim();
        if self.kb.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: self.kb.dim(),
            });
        }
        let mode = if self.config.deterministic_settle {
            SettleMode::Deterministic
        } else {
            SettleMode::Background
        };
        let timing = match self.synthetic {
            None => Timing::Measured,
            Some((model, seed)) => Timing::Synthetic {
                model,
                rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
                clock: ManualClock::new(0),
            },
        };
        Ok(PentaRag {
            kv: FixedKvCache::new(self.config.cache_max_entries),
            sc: SemanticCache::new(dim, self.config.semantic_threshold, self.config.cache_max_entries)?,
            akm: AdaptiveKnowledgeMemory::new(dim, self.config.akm_threshold, mode)?,
            order: self.config.probe_order(),
            config: self.config,
            embedder: self.embedder,
            backend: self.backend,
            kb: self.kb,
            timing,
            log: Mutex::new(Vec::new()),
            counts: Default::default(),
            unanswered: AtomicU64::new(0),
            next_id: AtomicU64::new(1),
        })
    }
}

/// The routing cascade with its caches, memories and backends.
pub struct PentaRag {
    config: RouterConfig,
    order: Vec<LayerTag>,
    embedder: Arc<dyn Embedder>,
    backend: Arc<dyn GenerationBackend>,
    kb: Arc<MainKnowledgeBase>,
    kv: FixedKvCache,
    sc: SemanticCache,
    akm: AdaptiveKnowledgeMemory,
    timing: Timing,
    log: Mutex<Vec<TraceRecord>>,
    counts: [AtomicU64; 5],
    unanswered: AtomicU64,
    next_id: AtomicU64,
}

struct Served {
    answer: AnswerRecord,
    /// What gets written back to the caches.
    stored: AnswerRecord,
    context: Vec<String>,
}

impl PentaRag {
    pub fn builder(
        embedder: Arc<dyn Embedder>,
        backend: Arc<dyn GenerationBackend>,
        kb: Arc<MainKnowledgeBase>,
    ) -> RouterBuilder {
        RouterBuilder {
            config: RouterConfig::default(),
            embedder,
            backend,
            kb,
            synthetic: None,
        }
    }

    pub fn config(&self) -> &RouterConfig {
        &self.config
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn knowledge_base(&self) -> &Arc<MainKnowledgeBase> {
        &self.kb
    }

    pub fn fixed_kv(&self) -> &FixedKvCache {
        &self.kv
    }

    pub fn semantic_cache(&self) -> &SemanticCache {
        &self.sc
    }

    pub fn adaptive_memory(&self) -> &AdaptiveKnowledgeMemory {
        &self.akm
    }

    pub fn now_ns(&self) -> u64 {
        match &self.timing {
            Timing::Measured => MonotonicClock.now_ns(),
            Timing::Synthetic { clock, .. } => clock.now_ns(),
        }
    }

    /// Builds a query stamped with this router's clock and id sequence.
    pub fn make_query(&self, text: &str, session_id: &SessionId) -> Result<Query> {
        let id = QueryId(self.next_id.fetch_add(1, Ordering::Relaxed));
        Query::new(id, text, session_id.clone(), self.now_ns())
    }

    pub fn route_text(&self, text: &str, session_id: &SessionId) -> Result<Routed> {
        let query = self.make_query(text, session_id)?;
        self.route(&query)
    }

    pub fn route(&self, query: &Query) -> Result<Routed> {
        self.route_with_origin(query, None)
    }

    pub fn route_with_origin(&self, query: &Query, origin: Option<QueryOrigin>) -> Result<Routed> {
        if self.akm.mode() == SettleMode::Deterministic {
            self.akm.settle();
        }
        let started = Instant::now();
        let mut probes: Vec<LayerProbe> = Vec::with_capacity(self.order.len());
        let mut embedding: Option<EmbeddingVector> = None;
        let mut served: Option<Served> = None;

        for &layer in &self.order {
            let probe_start = Instant::now();
            let (outcome, result) = self.probe(layer, query, &mut embedding)?;
            let duration_seconds = self.probe_duration(layer, outcome, probe_start);
            probes.push(LayerProbe {
                layer,
                outcome,
                duration_seconds,
            });
            if let Some(s) = result {
                served = Some(s);
                break;
            }
        }

        let latency_seconds = match &self.timing {
            Timing::Measured => started.elapsed().as_secs_f64(),
            Timing::Synthetic { clock, .. } => {
                let total: f64 = probes.iter().map(|p| p.duration_seconds).sum();
                clock.advance_secs(total);
                total
            }
        };

        let Some(Served {
            mut answer,
            stored,
            context,
        }) = served
        else {
            self.unanswered.fetch_add(1, Ordering::Relaxed);
            return Err(Error::AllLayersMissed {
                query_id: query.id,
                layers_probed: probes.iter().map(|p| (p.layer, p.outcome)).collect(),
            });
        };

        let now = self.now_ns();
        if answer.layer == LayerTag::FixedKv {
            self.kv.touch(&query.text, now);
            self.sc.touch(&query.text, now);
        } else {
            let embedding = match embedding {
                Some(e) => e,
                None => self.embedder.embed(&query.text)?,
            };
            writeback(&self.kv, &self.sc, &query.text, &embedding, &stored, now);
        }

        answer.latency_seconds = latency_seconds;
        let trace = RouteTraceEvent {
            query_id: query.id,
            layers_probed: probes,
            serving_layer: answer.layer,
            latency_seconds,
            timestamp: now,
        };
        self.counts[answer.layer.index()].fetch_add(1, Ordering::Relaxed);
        self.log.lock().push(TraceRecord {
            query: query.clone(),
            origin,
            answer: answer.clone(),
            context,
            trace: trace.clone(),
        });
        Ok(Routed { answer, trace })
    }

    fn embedding<'a>(&self, text: &str, slot: &'a mut Option<EmbeddingVector>) -> Result<&'a EmbeddingVector> {
        if slot.is_none() {
            *slot = Some(self.embedder.embed(text)?);
        }
        Ok(slot.as_ref().expect("just filled"))
    }

    fn probe(
        &self,
        layer: LayerTag,
        query: &Query,
        embedding: &mut Option<EmbeddingVector>,
    ) -> Result<(LayerOutcome, Option<Served>)> {
        let text = query.text.as_str();
        let miss = Ok((LayerOutcome::Miss, None));
        match layer {
            LayerTag::FixedKv => match self.kv.get(text) {
                Some(cached) => Ok((
                    LayerOutcome::Hit,
                    Some(Served {
                        answer: cached.answer.served_from(LayerTag::FixedKv),
                        stored: cached.answer,
                        context: Vec::new(),
                    }),
                )),
                None => miss,
            },
            LayerTag::SemanticCache => {
                let e = self.embedding(text, embedding)?;
                match self.sc.lookup(e)? {
                    Some(hit) => Ok((
                        LayerOutcome::Hit,
                        Some(Served {
                            answer: hit.cached.answer.served_from(LayerTag::SemanticCache),
                            stored: hit.cached.answer,
                            context: Vec::new(),
                        }),
                    )),
                    None => miss,
                }
            }
            LayerTag::MemoryRecall => match memory_recall(self.backend.as_ref(), text, self.config.recall_threshold) {
                Ok(Some(answer)) => Ok((
                    LayerOutcome::Hit,
                    Some(Served {
                        stored: answer.clone(),
                        answer,
                        context: Vec::new(),
                    }),
                )),
                Ok(None) => Ok((LayerOutcome::Rejected, None)),
                Err(e) => {
                    tracing::warn!(error = %e, "memory recall failed; falling through");
                    miss
                }
            },
            LayerTag::AdaptiveMemory => {
                let e = self.embedding(text, embedding)?;
                match self.akm.retrieve(e, self.config.retrieval_k)? {
                    Some(passages) => {
                        let answer =
                            generate_with_context(self.backend.as_ref(), text, &passages, LayerTag::AdaptiveMemory)?;
                        Ok((
                            LayerOutcome::Hit,
                            Some(Served {
                                stored: answer.clone(),
                                answer,
                                context: passages.into_iter().map(|p| p.passage.text).collect(),
                            }),
                        ))
                    }
                    None => miss,
                }
            }
            LayerTag::NaiveRag => {
                let e = self.embedding(text, embedding)?;
                let retrieval = match self.kb.retrieve(e, self.config.retrieval_k, self.config.akm_seed_k) {
                    Ok(r) => r,
                    Err(Error::EmptyKnowledgeBase) => return miss,
                    Err(e) => return Err(e),
                };
                if !self.config.disabled_layers.contains(&LayerTag::AdaptiveMemory) {
                    self.akm.enqueue(retrieval.seed);
                }
                let answer = generate_with_context(self.backend.as_ref(), text, &retrieval.top, LayerTag::NaiveRag)?;
                Ok((
                    LayerOutcome::Hit,
                    Some(Served {
                        stored: answer.clone(),
                        answer,
                        context: retrieval.top.into_iter().map(|p| p.passage.text).collect(),
                    }),
                ))
            }
        }
    }

    fn probe_duration(&self, layer: LayerTag, outcome: LayerOutcome, started: Instant) -> f64 {
        match &self.timing {
            Timing::Measured => started.elapsed().as_secs_f64(),
            Timing::Synthetic { model, rng, .. } => model.sample(layer, outcome, &mut *rng.lock()),
        }
    }

    /// Applies any queued adaptive-memory insertions now.
    pub fn settle(&self) {
        self.akm.wait_idle();
    }

    /// Clears both caches and the adaptive memory. Counters and the trace log
    /// are kept.
    pub fn reset_session(&self) {
        self.kv.clear();
        self.sc.clear();
        self.akm.reset();
    }

    pub fn trace_log(&self) -> Vec<TraceRecord> {
        self.log.lock().clone()
    }

    pub fn take_log(&self) -> Vec<TraceRecord> {
        std::mem::take(&mut *self.log.lock())
    }

    pub fn layer_counts(&self) -> PerLayer<u64> {
        PerLayer(std::array::from_fn(|i| self.counts[i].load(Ordering::Relaxed)))
    }

    pub fn stats(&self) -> RouterStats {
        let counts = self.layer_counts();
        let (akm_hits, akm_misses) = self.akm.hit_counts();
        RouterStats {
            total_queries: counts.0.iter().sum::<u64>() + self.unanswered.load(Ordering::Relaxed),
            unanswered: self.unanswered.load(Ordering::Relaxed),
            layer_counts: counts,
            fixed_kv: self.kv.stats(),
            semantic_cache: self.sc.stats(),
            adaptive_memory_size: self.akm.len(),
            adaptive_memory_hits: akm_hits,
            adaptive_memory_misses: akm_misses,
            knowledge_base_size: self.kb.len(),
        }
    }
}

/// One triple per context-generated answer: the question, the supporting
/// passages joined in rank order, and the answer.
pub fn export_triples(records: &[TraceRecord]) -> Vec<TrainingTriple> {
    records
        .iter()
        .filter(|r| r.trace.serving_layer.is_context_generated())
        .filter_map(|r| TrainingTriple::new(r.query.text.clone(), r.context.join("\n\n"), r.answer.text.clone()).ok())
        .collect()
}
