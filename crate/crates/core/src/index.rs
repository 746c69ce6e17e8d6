//! Exact flat cosine index.
//!
//! Every search scans every stored vector; there is no approximation, so
//! recall is always 100%. Scores are f32 components accumulated into f64 sums
//! and ties are broken by insertion order, which makes search fully
//! deterministic for a given construction sequence.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{dot, EmbeddingVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub entry_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug)]
pub struct FlatIndex<P> {
    dim: usize,
    ids: Vec<String>,
    /// Row-major, `dim` components per entry, in insertion order.
    vectors: Vec<f32>,
    payloads: Vec<P>,
    slots: HashMap<String, usize>,
    insertion_counter: u64,
    searches: AtomicU64,
}

impl<P: Clone> Clone for FlatIndex<P> {
    fn clone(&self) -> Self {
        Self {
            dim: self.dim,
            ids: self.ids.clone(),
            vectors: self.vectors.clone(),
            payloads: self.payloads.clone(),
            slots: self.slots.clone(),
            insertion_counter: self.insertion_counter,
            searches: AtomicU64::new(self.searches.load(Ordering::Relaxed)),
        }
    }
}

impl<P> FlatIndex<P> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            payloads: Vec::new(),
            slots: HashMap::new(),
            insertion_counter: 0,
            searches: AtomicU64::new(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of insert calls ever made, upserts included.
    pub fn insertion_counter(&self) -> u64 {
        self.insertion_counter
    }

    /// Number of searches served so far.
    pub fn search_count(&self) -> u64 {
        self.searches.load(Ordering::Relaxed)
    }

    pub fn contains(&self, entry_id: &str) -> bool {
        self.slots.contains_key(entry_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(String::as_str)
    }

    pub fn get(&self, entry_id: &str) -> Option<(&[f32], &P)> {
        let slot = *self.slots.get(entry_id)?;
        Some((self.row(slot), &self.payloads[slot]))
    }

    pub fn payload(&self, entry_id: &str) -> Option<&P> {
        self.slots.get(entry_id).map(|&s| &self.payloads[s])
    }

    pub fn payload_mut(&mut self, entry_id: &str) -> Option<&mut P> {
        self.slots.get(entry_id).map(|&s| &mut self.payloads[s])
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32], &P)> {
        (0..self.len()).map(move |s| (self.ids[s].as_str(), self.row(s), &self.payloads[s]))
    }

    fn row(&self, slot: usize) -> &[f32] {
        &self.vectors[slot * self.dim..(slot + 1) * self.dim]
    }

    /// Inserts an entry, or replaces vector and payload of an existing id in place.
    /// An upserted entry keeps its original position for tie-breaking.
    pub fn insert(&mut self, entry_id: impl Into<String>, vector: &EmbeddingVector, payload: P) -> Result<()> {
        if vector.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: vector.dim(),
            });
        }
        let entry_id = entry_id.into();
        self.insertion_counter += 1;
        match self.slots.get(&entry_id) {
            Some(&slot) => {
                self.vectors[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(vector.as_slice());
                self.payloads[slot] = payload;
            }
            None => {
                self.slots.insert(entry_id.clone(), self.ids.len());
                self.ids.push(entry_id);
                self.vectors.extend_from_slice(vector.as_slice());
                self.payloads.push(payload);
            }
        }
        Ok(())
    }

    /// Removes an entry, preserving the relative order of the rest. O(n).
    pub fn remove(&mut self, entry_id: &str) -> Option<P> {
        let slot = self.slots.remove(entry_id)?;
        self.ids.remove(slot);
        self.vectors.drain(slot * self.dim..(slot + 1) * self.dim);
        let payload = self.payloads.remove(slot);
        for s in self.slots.values_mut() {
            if *s > slot {
                *s -= 1;
            }
        }
        Some(payload)
    }

    pub fn clear(&mut self) {
        self.ids.clear();
        self.vectors.clear();
        self.payloads.clear();
        self.slots.clear();
    }

    /// Exact top-`k` by cosine, scores non-increasing, ties by insertion order.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<SearchHit>> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        self.searches.fetch_add(1, Ordering::Relaxed);
        let n = self.len();
        let k = k.min(n);
        if k == 0 {
            return Ok(Vec::new());
        }
        let q = query.as_slice();
        let mut scored: Vec<(f64, usize)> = (0..n)
            .map(|slot| (dot(q, self.row(slot)).clamp(-1.0, 1.0), slot))
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < n {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(i, (score, slot))| SearchHit {
                entry_id: self.ids[slot].clone(),
                score,
                rank: i + 1,
            })
            .collect())
    }
}

const MAGIC: &[u8; 8] = b"PRAGFLAT";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8 + 8;

/// Serialized form of a [`FlatIndex`]: a binary vector file plus a JSONL
/// sidecar carrying entry ids and payloads, one line per record.
///
/// Binary layout (little-endian): magic `PRAGFLAT`, u32 version, u32 dim,
/// u64 count, u64 checksum, then `count * dim` f32 components. The checksum is
/// the first 8 bytes of SHA-256 over the component bytes followed by the
/// sidecar bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub vectors: Vec<u8>,
    pub sidecar: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct SidecarLine<P> {
    entry_id: String,
    payload: P,
}

fn checksum(records: &[u8], sidecar: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(records);
    h.update(sidecar);
    let digest = h.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(first)
}

impl<P: Serialize + DeserializeOwned> FlatIndex<P> {
    pub fn snapshot(&self) -> Result<Snapshot> {
        let mut sidecar = Vec::new();
        for (id, _, payload) in self.iter() {
            serde_json::to_writer(
                &mut sidecar,
                &SidecarLine {
                    entry_id: id.to_owned(),
                    payload,
                },
            )?;
            sidecar.push(b'\n');
        }
        let records: Vec<u8> = self.vectors.iter().flat_map(|c| c.to_le_bytes()).collect();
        let mut out = Vec::with_capacity(HEADER_LEN + records.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&checksum(&records, &sidecar).to_le_bytes());
        out.extend_from_slice(&records);
        Ok(Snapshot { vectors: out, sidecar })
    }

    pub fn restore(snapshot: &Snapshot) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptSnapshot(m.to_owned());
        let bytes = &snapshot.vectors;
        if bytes.len() < HEADER_LEN {
            return Err(corrupt("truncated header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != VERSION {
            return Err(Error::CorruptSnapshot(format!("unsupported version {version}")));
        }
        let dim = u32_at(12) as usize;
        let count = u64_at(16) as usize;
        let expected_sum = u64_at(24);
        if dim == 0 {
            return Err(corrupt("zero dimension"));
        }
        let records = &bytes[HEADER_LEN..];
        if records.len() != count * dim * 4 {
            return Err(Error::CorruptSnapshot(format!(
                "expected {} record bytes, found {}",
                count * dim * 4,
                records.len()
            )));
        }
        if checksum(records, &snapshot.sidecar) != expected_sum {
            return Err(corrupt("checksum mismatch"));
        }
        let components: Vec<f32> = records
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let lines: Vec<&[u8]> = snapshot
            .sidecar
            .split(|&b| b == b'\n')
            .filter(|l| !l.is_empty())
            .collect();
        if lines.len() != count {
            return Err(Error::CorruptSnapshot(format!(
                "{count} records but {} sidecar lines",
                lines.len()
            )));
        }
        let mut index = FlatIndex::new(dim);
        for (row, line) in components.chunks_exact(dim).zip(lines) {
            let entry: SidecarLine<P> =
                serde_json::from_slice(line).map_err(|e| Error::CorruptSnapshot(e.to_string()))?;
            let vector = EmbeddingVector::new(row.to_vec()).map_err(|e| Error::CorruptSnapshot(e.to_string()))?;
            if index.contains(&entry.entry_id) {
                return Err(Error::CorruptSnapshot(format!("duplicate id {}", entry.entry_id)));
            }
            index.insert(entry.entry_id, &vector, entry.payload)?;
        }
        Ok(index)
    }
}

impl Snapshot {
    /// Writes `<name>.idx` and `<name>.jsonl` into `dir`.
    pub fn write_to(&self, dir: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{name}.idx")), &self.vectors)?;
        fs::write(dir.join(format!("{name}.jsonl")), &self.sidecar)?;
        Ok(())
    }

    pub fn read_from(dir: &Path, name: &str) -> Result<Self> {
        Ok(Self {
            vectors: fs::read(dir.join(format!("{name}.idx")))?,
            sidecar: fs::read(dir.join(format!("{name}.jsonl")))?,
        })
    }
}
