//! Layer 5 (main knowledge base) and layer 4 (adaptive knowledge memory).
//!
//! The adaptive memory is a subset of the main knowledge base grown at
//! runtime: every main-KB search queues its top hits for insertion. Queued
//! passages never block the query that produced them. In deterministic mode
//! they are applied at a barrier before the next query is routed; in
//! background mode a worker thread applies them shortly after.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::index::{FlatIndex, Snapshot};
use crate::jsonl;
use crate::model::Passage;

pub const DEFAULT_RETRIEVAL_K: usize = 3;
pub const DEFAULT_AKM_SEED_K: usize = 10;
pub const DEFAULT_AKM_THRESHOLD: f64 = 0.85;

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub id: String,
    pub text: String,
    pub source: String,
    /// Optional QA annotation used by the stub generation backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

/// What the indices store next to each passage vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageRecord {
    pub text: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPassage {
    pub passage: Passage,
    pub answer: Option<String>,
    pub score: f64,
    pub rank: usize,
}

fn scored(index: &FlatIndex<PassageRecord>, query: &EmbeddingVector, k: usize) -> Result<Vec<ScoredPassage>> {
    index
        .search(query, k)?
        .into_iter()
        .map(|hit| {
            let (row, record) = index.get(&hit.entry_id).expect("hit id is indexed");
            Ok(ScoredPassage {
                passage: Passage {
                    id: hit.entry_id,
                    text: record.text.clone(),
                    source: record.source.clone(),
                    embedding: EmbeddingVector::new(row.to_vec())?,
                },
                answer: record.answer.clone(),
                score: hit.score,
                rank: hit.rank,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub name: String,
    /// Monotonic nanoseconds of the last ingest.
    pub ingested_at: u64,
    pub count: usize,
}

/// Result of a main-KB retrieval: the passages for generation and the longer
/// list that seeds the adaptive memory. `top` is always a prefix of `seed`
/// when `seed_k >= k`.
#[derive(Debug, Clone)]
pub struct Retrieval {
    pub top: Vec<ScoredPassage>,
    pub seed: Vec<ScoredPassage>,
}

#[derive(Debug)]
pub struct MainKnowledgeBase {
    index: RwLock<FlatIndex<PassageRecord>>,
    meta: RwLock<CorpusMeta>,
}

impl MainKnowledgeBase {
    pub fn new(dim: usize, name: impl Into<String>) -> Self {
        Self {
            index: RwLock::new(FlatIndex::new(dim)),
            meta: RwLock::new(CorpusMeta {
                name: name.into(),
                ..Default::default()
            }),
        }
    }

    /// Embeds and upserts passages; returns how many lines were ingested.
    pub fn ingest(&self, embedder: &dyn Embedder, lines: &[CorpusLine], now_ns: u64) -> Result<usize> {
        let texts: Vec<&str> = lines.iter().map(|l| l.text.as_str()).collect();
        let vectors = embedder.embed_batch(&texts)?;
        let mut index = self.index.write();
        for (line, vector) in lines.iter().zip(&vectors) {
            index.insert(
                line.id.clone(),
                vector,
                PassageRecord {
                    text: line.text.clone(),
                    source: line.source.clone(),
                    answer: line.answer.clone(),
                },
            )?;
        }
        let mut meta = self.meta.write();
        meta.ingested_at = now_ns;
        meta.count = index.len();
        Ok(lines.len())
    }

    pub fn ingest_file(&self, embedder: &dyn Embedder, path: &Path, lenient: bool, now_ns: u64) -> Result<usize> {
        let lines: Vec<CorpusLine> = jsonl::read_jsonl_file(path, lenient)?;
        self.ingest(embedder, &lines, now_ns)
    }

    /// Exact top-`k` plus top-`seed_k` for adaptive-memory seeding, from one scan.
    pub fn retrieve(&self, query: &EmbeddingVector, k: usize, seed_k: usize) -> Result<Retrieval> {
        let index = self.index.read();
        if index.is_empty() {
            return Err(Error::EmptyKnowledgeBase);
        }
        let seed = scored(&index, query, k.max(seed_k))?;
        let top = seed.iter().take(k).cloned().collect();
        let seed = seed.into_iter().take(seed_k).collect();
        Ok(Retrieval { top, seed })
    }

    pub fn len(&self) -> usize {
        self.index.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.read().contains(id)
    }

    pub fn meta(&self) -> CorpusMeta {
        self.meta.read().clone()
    }

    pub fn search_count(&self) -> u64 {
        self.index.read().search_count()
    }

    pub fn dim(&self) -> usize {
        self.index.read().dim()
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        self.index.read().snapshot()
    }

    pub fn restore(snapshot: &Snapshot, name: impl Into<String>) -> Result<Self> {
        let index: FlatIndex<PassageRecord> = FlatIndex::restore(snapshot)?;
        let meta = CorpusMeta {
            name: name.into(),
            ingested_at: 0,
            count: index.len(),
        };
        Ok(Self {
            index: RwLock::new(index),
            meta: RwLock::new(meta),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SettleMode {
    /// Queued passages become visible at the start of the next routed query.
    #[default]
    Deterministic,
    /// A worker thread applies queued passages asynchronously.
    Background,
}

#[derive(Debug)]
struct AkmShared {
    index: RwLock<FlatIndex<PassageRecord>>,
    pending: Mutex<Pending>,
    wake: Condvar,
    idle: Condvar,
    threshold: f64,
    hits: AtomicU64,
    misses: AtomicU64,
    inserted: AtomicU64,
}

#[derive(Debug, Default)]
struct Pending {
    queue: Vec<ScoredPassage>,
    applying: bool,
    shutdown: bool,
}

impl AkmShared {
    fn apply(&self, batch: Vec<ScoredPassage>) {
        let mut index = self.index.write();
        for sp in batch {
            if index.contains(&sp.passage.id) {
                continue;
            }
            let record = PassageRecord {
                text: sp.passage.text,
                source: sp.passage.source,
                answer: sp.answer,
            };
            match index.insert(sp.passage.id, &sp.passage.embedding, record) {
                Ok(()) => {
                    self.inserted.fetch_add(1, Ordering::Relaxed);
                }
                Err(e) => tracing::warn!(error = %e, "adaptive memory insert failed"),
            }
        }
    }

    fn drain(&self) {
        let batch = {
            let mut p = self.pending.lock();
            p.applying = true;
            std::mem::take(&mut p.queue)
        };
        self.apply(batch);
        let mut p = self.pending.lock();
        p.applying = false;
        if p.queue.is_empty() {
            self.idle.notify_all();
        }
    }
}

/// Adaptive knowledge memory (layer 4).
#[derive(Debug)]
pub struct AdaptiveKnowledgeMemory {
    shared: Arc<AkmShared>,
    mode: SettleMode,
    worker: Option<JoinHandle<()>>,
}

impl AdaptiveKnowledgeMemory {
    pub fn new(dim: usize, threshold: f64, mode: SettleMode) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::Config(format!("akm threshold {threshold} outside (0, 1]")));
        }
        let shared = Arc::new(AkmShared {
            index: RwLock::new(FlatIndex::new(dim)),
            pending: Mutex::default(),
            wake: Condvar::new(),
            idle: Condvar::new(),
            threshold,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            inserted: AtomicU64::new(0),
        });
        let worker = (mode == SettleMode::Background).then(|| {
            let shared = Arc::clone(&shared);
            std::thread::Builder::new()
                .name("akm-settle".into())
                .spawn(move || loop {
                    {
                        let mut p = shared.pending.lock();
                        while p.queue.is_empty() && !p.shutdown {
                            shared.wake.wait(&mut p);
                        }
                        if p.shutdown {
                            return;
                        }
                    }
                    shared.drain();
                })
                .expect("spawn adaptive memory worker")
        });
        Ok(Self { shared, mode, worker })
    }

    pub fn mode(&self) -> SettleMode {
        self.mode
    }

    pub fn threshold(&self) -> f64 {
        self.shared.threshold
    }

    /// Queues main-KB hits for insertion. Never blocks on the index.
    pub fn enqueue(&self, passages: Vec<ScoredPassage>) {
        if passages.is_empty() {
            return;
        }
        self.shared.pending.lock().queue.extend(passages);
        if self.mode == SettleMode::Background {
            self.shared.wake.notify_one();
        }
    }

    /// Applies everything queued so far on the calling thread.
    pub fn settle(&self) {
        self.shared.drain();
    }

    /// Blocks until no insertion is queued or in flight.
    pub fn wait_idle(&self) {
        let mut p = self.shared.pending.lock();
        while !p.queue.is_empty() || p.applying {
            if self.mode == SettleMode::Deterministic {
                drop(p);
                self.shared.drain();
                p = self.shared.pending.lock();
                continue;
            }
            self.shared.idle.wait(&mut p);
        }
    }

    /// Immediate insertion, skipping ids already present.
    pub fn insert(&self, passages: Vec<ScoredPassage>) {
        self.shared.apply(passages);
    }

    /// Top-`k` if the best score reaches the threshold, otherwise a miss.
    pub fn retrieve(&self, query: &EmbeddingVector, k: usize) -> Result<Option<Vec<ScoredPassage>>> {
        let index = self.shared.index.read();
        let hits = if index.is_empty() {
            Vec::new()
        } else {
            scored(&index, query, k)?
        };
        drop(index);
        let accepted = hits.first().is_some_and(|h| h.score >= self.shared.threshold);
        let counter = if accepted { &self.shared.hits } else { &self.shared.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        Ok(accepted.then_some(hits))
    }

    pub fn len(&self) -> usize {
        self.shared.index.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<String> {
        self.shared.index.read().ids().map(str::to_owned).collect()
    }

    pub fn search_count(&self) -> u64 {
        self.shared.index.read().search_count()
    }

    /// Distinct passages ever inserted since the last reset.
    pub fn inserted_total(&self) -> u64 {
        self.shared.inserted.load(Ordering::Relaxed)
    }

    pub fn hit_counts(&self) -> (u64, u64) {
        (
            self.shared.hits.load(Ordering::Relaxed),
            self.shared.misses.load(Ordering::Relaxed),
        )
    }

    pub fn reset(&self) {
        self.wait_idle();
        self.shared.pending.lock().queue.clear();
        self.shared.index.write().clear();
        self.shared.hits.store(0, Ordering::Relaxed);
        self.shared.misses.store(0, Ordering::Relaxed);
        self.shared.inserted.store(0, Ordering::Relaxed);
    }
}

impl Drop for AdaptiveKnowledgeMemory {
    fn drop(&mut self) {
        if let Some(handle) = self.worker.take() {
            self.shared.pending.lock().shutdown = true;
            self.shared.wake.notify_all();
            let _ = handle.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{cosine, HashEmbedder};

    fn corpus(n: usize) -> Vec<CorpusLine> {
        (0..n)
            .map(|i| CorpusLine {
                id: format!("p{i}"),
                text: format!("passage number {i} about topic{} and subject{}", i % 7, i % 13),
                source: "test".into(),
                answer: Some(format!("answer {i}")),
            })
            .collect()
    }

    fn kb(n: usize) -> (HashEmbedder, MainKnowledgeBase) {
        let e = HashEmbedder::default();
        let kb = MainKnowledgeBase::new(e.dim(), "test");
        kb.ingest(&e, &corpus(n), 0).unwrap();
        (e, kb)
    }

    #[test]
    fn k_equal_to_size_returns_everything_descending() {
        let (e, kb) = kb(3);
        let q = e.embed("passage number 1 about topic1").unwrap();
        let r = kb.retrieve(&q, 3, 10).unwrap();
        assert_eq!(r.top.len(), 3);
        assert_eq!(r.seed.len(), 3);
        assert!(r.top.windows(2).all(|w| w[0].score >= w[1].score));
        assert_eq!(r.top[0].passage.id, "p1");
    }

    #[test]
    fn top_k_matches_exhaustive_oracle() {
        let (e, kb) = kb(100);
        let q = e.embed("topic3 subject5 passage").unwrap();
        let lines = corpus(100);
        let mut oracle: Vec<(f64, usize)> = lines
            .iter()
            .enumerate()
            .map(|(i, l)| (cosine(&q, &e.embed(&l.text).unwrap()).unwrap(), i))
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let r = kb.retrieve(&q, 3, 10).unwrap();
        let got: Vec<_> = r.top.iter().map(|p| p.passage.id.clone()).collect();
        let want: Vec<_> = oracle[..3].iter().map(|(_, i)| format!("p{i}")).collect();
        assert_eq!(got, want);
        assert_eq!(r.seed.len(), 10);
        for (a, b) in r.top.iter().zip(&r.seed) {
            assert_eq!(a.passage.id, b.passage.id);
        }
    }

    #[test]
    fn empty_kb_is_an_error() {
        let e = HashEmbedder::default();
        let kb = MainKnowledgeBase::new(e.dim(), "empty");
        let q = e.embed("anything").unwrap();
        assert!(matches!(kb.retrieve(&q, 3, 10), Err(Error::EmptyKnowledgeBase)));
    }

    #[test]
    fn akm_dedupes_reinserted_passages() {
        let (e, kb) = kb(30);
        let akm = AdaptiveKnowledgeMemory::new(e.dim(), 0.85, SettleMode::Deterministic).unwrap();
        let r = kb.retrieve(&e.embed("topic1").unwrap(), 3, 10).unwrap();
        akm.enqueue(r.seed.clone());
        akm.settle();
        assert_eq!(akm.len(), 10);
        akm.enqueue(r.seed);
        akm.settle();
        assert_eq!(akm.len(), 10);
        assert_eq!(akm.inserted_total(), 10);
    }

    #[test]
    fn deterministic_mode_defers_until_settle() {
        let (e, kb) = kb(30);
        let akm = AdaptiveKnowledgeMemory::new(e.dim(), 0.85, SettleMode::Deterministic).unwrap();
        let r = kb.retrieve(&e.embed("topic2").unwrap(), 3, 10).unwrap();
        akm.enqueue(r.seed);
        assert_eq!(akm.len(), 0);
        akm.settle();
        assert_eq!(akm.len(), 10);
    }

    #[test]
    fn background_mode_applies_asynchronously() {
        let (e, kb) = kb(30);
        let akm = AdaptiveKnowledgeMemory::new(e.dim(), 0.85, SettleMode::Background).unwrap();
        let r = kb.retrieve(&e.embed("topic4").unwrap(), 3, 10).unwrap();
        akm.enqueue(r.seed);
        akm.wait_idle();
        assert_eq!(akm.len(), 10);
    }

    #[test]
    fn akm_hit_gate() {
        let (e, kb) = kb(30);
        let akm = AdaptiveKnowledgeMemory::new(e.dim(), 0.85, SettleMode::Deterministic).unwrap();
        let any = e.embed("passage number 4 about topic4 and subject4").unwrap();
        assert!(akm.retrieve(&any, 3).unwrap().is_none());

        let r = kb.retrieve(&any, 3, 10).unwrap();
        akm.insert(r.seed.clone());
        let exact = r.seed[0].passage.embedding.clone();
        let hit = akm.retrieve(&exact, 3).unwrap().unwrap();
        assert_eq!(hit[0].passage.id, r.seed[0].passage.id);
        assert!((hit[0].score - 1.0).abs() < 1e-6);

        let weak = e.embed("topic4 unrelated words here entirely").unwrap();
        let top = kb.retrieve(&weak, 1, 1).unwrap().top[0].score;
        assert!(top < 0.85);
        assert!(akm.retrieve(&weak, 3).unwrap().is_none());
        assert_eq!(akm.hit_counts(), (1, 2));
    }

    #[test]
    fn akm_is_subset_of_main_kb() {
        let (e, kb) = kb(50);
        let akm = AdaptiveKnowledgeMemory::new(e.dim(), 0.85, SettleMode::Deterministic).unwrap();
        for t in ["topic1", "subject9", "number 33", "topic6 subject2"] {
            akm.insert(kb.retrieve(&e.embed(t).unwrap(), 3, 10).unwrap().seed);
        }
        assert!(akm.ids().iter().all(|id| kb.contains(id)));
        assert!(akm.len() <= 40);
    }

    #[test]
    fn kb_snapshot_round_trip() {
        let (e, kb) = kb(20);
        let back = MainKnowledgeBase::restore(&kb.snapshot().unwrap(), "copy").unwrap();
        let q = e.embed("topic5 subject3").unwrap();
        let a: Vec<_> = kb.retrieve(&q, 3, 10).unwrap().seed.into_iter().map(|p| p.passage).collect();
        let b: Vec<_> = back.retrieve(&q, 3, 10).unwrap().seed.into_iter().map(|p| p.passage).collect();
        assert_eq!(a, b);
        assert_eq!(back.meta().count, 20);
    }
}
