//! Layer 1 (fixed KV-cache) and layer 2 (semantic cache).
//!
//! Both caches are written through on every served answer. Neither evicts by
//! default; an optional entry cap turns on least-recently-used eviction for
//! long-running service processes.

use std::collections::HashMap;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::index::{FlatIndex, Snapshot};
use crate::model::AnswerRecord;

pub const DEFAULT_SEMANTIC_THRESHOLD: f64 = 0.85;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedAnswer {
    pub query_text: String,
    pub answer: AnswerRecord,
    /// Monotonic nanoseconds at first insertion of this key.
    pub created_at: u64,
    pub updated_at: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub entries: usize,
}

#[derive(Debug, Default)]
struct Counters {
    hits: AtomicU64,
    misses: AtomicU64,
}

impl Counters {
    fn record(&self, hit: bool) {
        if hit {
            self.hits.fetch_add(1, Ordering::Relaxed);
        } else {
            self.misses.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn reset(&self) {
        self.hits.store(0, Ordering::Relaxed);
        self.misses.store(0, Ordering::Relaxed);
    }
}

/// Recency bookkeeping for the optional LRU cap.
#[derive(Debug, Default)]
struct Recency {
    tick: u64,
    last_used: HashMap<String, u64>,
}

impl Recency {
    fn touch(&mut self, key: &str) {
        self.tick += 1;
        let tick = self.tick;
        match self.last_used.get_mut(key) {
            Some(t) => *t = tick,
            None => {
                self.last_used.insert(key.to_owned(), tick);
            }
        }
    }

    fn oldest(&self) -> Option<String> {
        self.last_used.iter().min_by_key(|(_, t)| **t).map(|(k, _)| k.clone())
    }

    fn forget(&mut self, key: &str) {
        self.last_used.remove(key);
    }
}

/// Exact byte-string match from query text to answer.
#[derive(Debug, Default)]
pub struct FixedKvCache {
    entries: RwLock<HashMap<String, CachedAnswer>>,
    max_entries: Option<usize>,
    recency: Mutex<Recency>,
    counters: Counters,
}

impl FixedKvCache {
    pub fn new(max_entries: Option<usize>) -> Self {
        Self {
            max_entries,
            ..Default::default()
        }
    }

    /// Hit iff a byte-identical key is present.
    pub fn get(&self, query_text: &str) -> Option<CachedAnswer> {
        let found = self.entries.read().get(query_text).cloned();
        self.counters.record(found.is_some());
        if found.is_some() && self.max_entries.is_some() {
            self.recency.lock().touch(query_text);
        }
        found
    }

    pub fn put(&self, query_text: &str, answer: AnswerRecord, now_ns: u64) {
        let mut entries = self.entries.write();
        match entries.get_mut(query_text) {
            Some(e) => {
                e.answer = answer;
                e.updated_at = now_ns;
            }
            None => {
                entries.insert(
                    query_text.to_owned(),
                    CachedAnswer {
                        query_text: query_text.to_owned(),
                        answer,
                        created_at: now_ns,
                        updated_at: now_ns,
                    },
                );
            }
        }
        if let Some(cap) = self.max_entries {
            let mut recency = self.recency.lock();
            recency.touch(query_text);
            while entries.len() > cap {
                let Some(victim) = recency.oldest() else { break };
                entries.remove(&victim);
                recency.forget(&victim);
            }
        }
    }

    /// Refreshes recency metadata without changing the stored answer.
    pub fn touch(&self, query_text: &str, now_ns: u64) {
        if let Some(e) = self.entries.write().get_mut(query_text) {
            e.updated_at = now_ns;
        }
        if self.max_entries.is_some() {
            self.recency.lock().touch(query_text);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.counters.hits.load(Ordering::Relaxed),
            misses: self.counters.misses.load(Ordering::Relaxed),
            entries: self.len(),
        }
    }

    pub fn clear(&self) {
        self.entries.write().clear();
        *self.recency.lock() = Recency::default();
        self.counters.reset();
    }

    /// Writes every entry as one JSON object per line, sorted by key.
    pub fn export_jsonl(&self, mut out: impl Write) -> Result<()> {
        let entries = self.entries.read();
        let mut keys: Vec<&String> = entries.keys().collect();
        keys.sort();
        for k in keys {
            serde_json::to_writer(&mut out, &entries[k])?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// A semantic-cache hit: the stored answer plus the matching score.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticHit {
    pub cached: CachedAnswer,
    pub score: f64,
}

/// Cosine-threshold cache keyed by query embeddings.
#[derive(Debug)]
pub struct SemanticCache {
    index: RwLock<FlatIndex<CachedAnswer>>,
    threshold: f64,
    max_entries: Option<usize>,
    recency: Mutex<Recency>,
    counters: Counters,
}

impl SemanticCache {
    pub fn new(dim: usize, threshold: f64, max_entries: Option<usize>) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::Config(format!("semantic threshold {threshold} outside (0, 1]")));
        }
        Ok(Self {
            index: RwLock::new(FlatIndex::new(dim)),
            threshold,
            max_entries,
            recency: Mutex::default(),
            counters: Counters::default(),
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Top-1 entry if its score is at least the threshold (inclusive).
    pub fn lookup(&self, query: &EmbeddingVector) -> Result<Option<SemanticHit>> {
        let index = self.index.read();
        let top = index.search(query, 1)?.into_iter().next();
        let hit = top.filter(|h| h.score >= self.threshold).map(|h| SemanticHit {
            cached: index.payload(&h.entry_id).cloned().expect("hit id is indexed"),
            score: h.score,
        });
        drop(index);
        self.counters.record(hit.is_some());
        if let (Some(h), Some(_)) = (&hit, self.max_entries) {
            self.recency.lock().touch(&h.cached.query_text);
        }
        Ok(hit)
    }

    /// Upserts keyed by the original query text.
    pub fn put(&self, query_text: &str, embedding: &EmbeddingVector, answer: AnswerRecord, now_ns: u64) -> Result<()> {
        let mut index = self.index.write();
        let created_at = index.payload(query_text).map_or(now_ns, |e| e.created_at);
        index.insert(
            query_text,
            embedding,
            CachedAnswer {
                query_text: query_text.to_owned(),
                answer,
                created_at,
                updated_at: now_ns,
            },
        )?;
        if let Some(cap) = self.max_entries {
            let mut recency = self.recency.lock();
            recency.touch(query_text);
            while index.len() > cap {
                let Some(victim) = recency.oldest() else { break };
                index.remove(&victim);
                recency.forget(&victim);
            }
        }
        Ok(())
    }

    pub fn touch(&self, query_text: &str, now_ns: u64) {
        if let Some(e) = self.index.write().payload_mut(query_text) {
            e.updated_at = now_ns;
        }
        if self.max_entries.is_some() {
            self.recency.lock().touch(query_text);
        }
    }

    pub fn len(&self) -> usize {
        self.index.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn search_count(&self) -> u64 {
        self.index.read().search_count()
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.counters.hits.load(Ordering::Relaxed),
            misses: self.counters.misses.load(Ordering::Relaxed),
            entries: self.len(),
        }
    }

    pub fn clear(&self) {
        self.index.write().clear();
        *self.recency.lock() = Recency::default();
        self.counters.reset();
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        self.index.read().snapshot()
    }

    pub fn restore(snapshot: &Snapshot, threshold: f64, max_entries: Option<usize>) -> Result<Self> {
        let index = FlatIndex::restore(snapshot)?;
        let cache = Self::new(index.dim(), threshold, max_entries)?;
        *cache.index.write() = index;
        Ok(cache)
    }
}

/// Stores a served answer in both caches: raw text into the KV-cache and its
/// embedding into the semantic cache. Failures are logged, not returned.
pub fn writeback(
    kv: &FixedKvCache,
    sc: &SemanticCache,
    query_text: &str,
    embedding: &EmbeddingVector,
    answer: &AnswerRecord,
    now_ns: u64,
) {
    kv.put(query_text, answer.clone(), now_ns);
    if let Err(e) = sc.put(query_text, embedding, answer.clone(), now_ns) {
        tracing::warn!(error = %e, "semantic cache writeback failed");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{cosine, Embedder, HashEmbedder};
    use crate::model::LayerTag;

    fn answer(text: &str) -> AnswerRecord {
        AnswerRecord {
            text: text.into(),
            layer: LayerTag::MemoryRecall,
            confidence: 0.9,
            supporting_passage_ids: vec![],
            latency_seconds: 0.0,
        }
    }

    /// Unit vector in 3 dims whose cosine with axis 0 is exactly `c`.
    fn at_cosine(c: f32) -> EmbeddingVector {
        EmbeddingVector::normalized(vec![c, (1.0 - c * c).sqrt(), 0.0]).unwrap()
    }

    #[test]
    fn exact_repeat_hits() {
        let kv = FixedKvCache::default();
        kv.put("Q1", answer("a"), 1);
        assert_eq!(kv.get("Q1").unwrap().answer.text, "a");
        assert_eq!(kv.stats(), CacheStats { hits: 1, misses: 0, entries: 1 });
    }

    #[test]
    fn kv_is_byte_exact() {
        let kv = FixedKvCache::default();
        kv.put("Q1", answer("a"), 1);
        assert!(kv.get("q1").is_none());
        assert!(kv.get("Q1 ").is_none());
        assert_eq!(kv.stats().misses, 2);
    }

    #[test]
    fn kv_last_write_wins() {
        let kv = FixedKvCache::default();
        kv.put("Q1", answer("a1"), 1);
        kv.put("Q1", answer("a2"), 2);
        let got = kv.get("Q1").unwrap();
        assert_eq!(got.answer.text, "a2");
        assert_eq!((got.created_at, got.updated_at), (1, 2));
        assert_eq!(kv.len(), 1);
    }

    #[test]
    fn kv_lru_cap_evicts_least_recently_used() {
        let kv = FixedKvCache::new(Some(2));
        kv.put("a", answer("1"), 1);
        kv.put("b", answer("2"), 2);
        assert!(kv.get("a").is_some());
        kv.put("c", answer("3"), 3);
        assert_eq!(kv.len(), 2);
        assert!(kv.get("b").is_none());
        assert!(kv.get("a").is_some());
        assert!(kv.get("c").is_some());
    }

    #[test]
    fn identical_query_hits_semantic_cache_with_score_one() {
        let e = HashEmbedder::default();
        let sc = SemanticCache::new(e.dim(), 0.85, None).unwrap();
        let v = e.embed("who painted the mona lisa").unwrap();
        sc.put("who painted the mona lisa", &v, answer("da vinci"), 1).unwrap();
        let hit = sc.lookup(&v).unwrap().unwrap();
        assert!((hit.score - 1.0).abs() < 1e-6);
        assert_eq!(hit.cached.answer.text, "da vinci");
    }

    #[test]
    fn threshold_is_inclusive_and_strict_below() {
        let sc = SemanticCache::new(3, 0.85, None).unwrap();
        sc.put("q", &EmbeddingVector::axis(3, 0), answer("a"), 1).unwrap();
        let below = at_cosine(0.84);
        let c = cosine(&below, &EmbeddingVector::axis(3, 0)).unwrap();
        assert!(c < 0.85);
        assert!(sc.lookup(&below).unwrap().is_none());

        // Equality boundary: threshold set to the exact achieved score.
        let probe = at_cosine(0.9);
        let exact = cosine(&probe, &EmbeddingVector::axis(3, 0)).unwrap();
        let sc_eq = SemanticCache::new(3, exact, None).unwrap();
        sc_eq.put("q", &EmbeddingVector::axis(3, 0), answer("a"), 1).unwrap();
        assert!(sc_eq.lookup(&probe).unwrap().is_some());
    }

    #[test]
    fn closer_entry_wins() {
        let sc = SemanticCache::new(3, 0.5, None).unwrap();
        sc.put("first", &EmbeddingVector::axis(3, 0), answer("one"), 1).unwrap();
        sc.put("second", &EmbeddingVector::axis(3, 1), answer("two"), 2).unwrap();
        let q = EmbeddingVector::normalized(vec![0.3, 0.9, 0.1]).unwrap();
        let c1 = cosine(&q, &EmbeddingVector::axis(3, 0)).unwrap();
        let c2 = cosine(&q, &EmbeddingVector::axis(3, 1)).unwrap();
        assert!(c2 > c1 && c2 >= 0.5);
        let hit = sc.lookup(&q).unwrap().unwrap();
        assert_eq!(hit.cached.answer.text, "two");
        assert!((hit.score - c2).abs() < 1e-6);
    }

    #[test]
    fn invalid_threshold_is_rejected() {
        assert!(SemanticCache::new(3, 0.0, None).is_err());
        assert!(SemanticCache::new(3, 1.01, None).is_err());
        assert!(SemanticCache::new(3, 1.0, None).is_ok());
    }

    #[test]
    fn writeback_populates_both_caches_with_latest_answer() {
        let e = HashEmbedder::default();
        let kv = FixedKvCache::default();
        let sc = SemanticCache::new(e.dim(), 0.85, None).unwrap();
        let q = "capital of australia";
        let v = e.embed(q).unwrap();
        writeback(&kv, &sc, q, &v, &answer("sydney"), 1);
        writeback(&kv, &sc, q, &v, &answer("canberra"), 2);
        assert_eq!(kv.get(q).unwrap().answer.text, "canberra");
        let hit = sc.lookup(&v).unwrap().unwrap();
        assert_eq!(hit.cached.answer.text, "canberra");
        assert_eq!(hit.cached.created_at, 1);
        assert_eq!(sc.len(), 1);
    }

    #[test]
    fn perturbed_query_hits_after_writeback() {
        let e = HashEmbedder::default();
        let kv = FixedKvCache::default();
        let sc = SemanticCache::new(e.dim(), 0.85, None).unwrap();
        let q = "Which river flows through the city of Vienna?";
        let q2 = "Which river flows through city of Vienna?";
        let c = cosine(&e.embed(q).unwrap(), &e.embed(q2).unwrap()).unwrap();
        assert!(c >= 0.85, "cosine {c}");
        writeback(&kv, &sc, q, &e.embed(q).unwrap(), &answer("danube"), 1);
        assert!(kv.get(q2).is_none());
        let hit = sc.lookup(&e.embed(q2).unwrap()).unwrap().unwrap();
        assert_eq!(hit.cached.query_text, q);
    }

    #[test]
    fn semantic_snapshot_round_trips() {
        let sc = SemanticCache::new(3, 0.85, None).unwrap();
        sc.put("q", &EmbeddingVector::axis(3, 0), answer("a"), 5).unwrap();
        let back = SemanticCache::restore(&sc.snapshot().unwrap(), 0.85, None).unwrap();
        let hit = back.lookup(&EmbeddingVector::axis(3, 0)).unwrap().unwrap();
        assert_eq!(hit.cached.answer.text, "a");
    }

    #[test]
    fn kv_export_is_sorted_jsonl() {
        let kv = FixedKvCache::default();
        kv.put("b", answer("2"), 1);
        kv.put("a", answer("1"), 1);
        let mut buf = Vec::new();
        kv.export_jsonl(&mut buf).unwrap();
        let lines: Vec<CachedAnswer> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines[0].query_text, "a");
        assert_eq!(lines[1].query_text, "b");
    }
}
