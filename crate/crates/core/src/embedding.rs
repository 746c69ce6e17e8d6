//! Text embedders and cosine arithmetic.
//!
//! The built-in [`HashEmbedder`] is a signed feature-hashing bag of tokens:
//! each token is lowercased, hashed with a fixed seed into one of
//! [`EMBEDDING_DIM`] buckets with a hash-derived sign, accumulated, and the
//! result L2-normalized. Queries that share most of their tokens land close
//! together, which is what the semantic cache needs at desk scale.
//!
//! [`RemoteEmbedder`] forwards to an external service speaking
//! `POST {"texts": [..]}` -> `{"vectors": [[..]]}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_DIM: usize = 1024;

/// Seed mixed into every token hash. Changing it changes every vector.
pub const HASH_SEED: u64 = 0x5045_4e54_4152_4147;

const UNIT_NORM_TOLERANCE: f64 = 1e-5;

/// A finite, unit-norm vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Wraps components that must already be unit-norm.
    pub fn new(components: Vec<f32>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidVector("zero-length vector".into()));
        }
        if components.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidVector("non-finite component".into()));
        }
        let norm = l2_norm(&components);
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::InvalidVector(format!("norm {norm} is not 1")));
        }
        Ok(Self(components))
    }

    /// Scales arbitrary finite components to unit length.
    pub fn normalized(mut components: Vec<f32>) -> Result<Self> {
        if components.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidVector("non-finite component".into()));
        }
        let norm = l2_norm(&components);
        if norm == 0.0 {
            return Err(Error::InvalidVector("zero vector".into()));
        }
        for c in &mut components {
            *c = (*c as f64 / norm) as f32;
        }
        Self::new(components)
    }

    /// Unit vector along one axis.
    pub fn axis(dim: usize, axis: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        Self(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = Error;

    fn try_from(v: Vec<f32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>().sqrt()
}

/// Dot product of f32 components accumulated in f64.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine similarity, clamped to `[-1, 1]`. Divides by both norms, so f32
/// rounding in the stored unit vectors does not leak into the result.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok((dot(&a.0, &b.0) / (l2_norm(&a.0) * l2_norm(&b.0))).clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<EmbeddingVector>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Splits on anything that is not alphanumeric and lowercases each token.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the bytes, seeded, with a splitmix finalizer for bucket spread.
pub fn seeded_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ HASH_SEED;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

/// Bucket index and sign for one token.
pub fn token_slot(token: &str, dim: usize) -> (usize, f32) {
    let h = seeded_hash(token.as_bytes());
    let bucket = (h % dim as u64) as usize;
    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
    (bucket, sign)
}

/// Deterministic signed feature-hashing embedder.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: EMBEDDING_DIM }
    }
}

impl HashEmbedder {
    pub fn with_dim(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut acc = vec![0.0f32; self.dim];
        for token in tokenize(text) {
            let (bucket, sign) = token_slot(&token, self.dim);
            acc[bucket] += sign;
        }
        if acc.iter().all(|&c| c == 0.0) {
            // No tokens, or every token cancelled out.
            let h = seeded_hash(text.as_bytes());
            let mut v = vec![0.0f32; self.dim];
            v[(h % self.dim as u64) as usize] = if h >> 63 == 0 { 1.0 } else { -1.0 };
            return EmbeddingVector::new(v);
        }
        EmbeddingVector::normalized(acc)
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

/// Client for an external embedding service.
pub struct RemoteEmbedder {
    endpoint: String,
    dim: usize,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            dim: EMBEDDING_DIM,
            agent,
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        self.embed_batch(&[text])?
            .pop()
            .ok_or_else(|| Error::EmbedderUnavailable("empty response".into()))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        if texts.iter().any(|t| t.is_empty()) {
            return Err(Error::EmptyInput);
        }
        let unavailable = |e: ureq::Error| Error::EmbedderUnavailable(e.to_string());
        let resp: EmbedResponse = self
            .agent
            .post(&self.endpoint)
            .send_json(EmbedRequest { texts })
            .map_err(unavailable)?
            .body_mut()
            .read_json()
            .map_err(unavailable)?;
        if resp.vectors.len() != texts.len() {
            return Err(Error::EmbedderUnavailable(format!(
                "asked for {} vectors, got {}",
                texts.len(),
                resp.vectors.len()
            )));
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim,
                        actual: v.len(),
                    });
                }
                EmbeddingVector::normalized(v)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle_cosine(a: &[f32], b: &[f32]) -> f64 {
        let (mut s, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..a.len() {
            s += a[i] as f64 * b[i] as f64;
            na += a[i] as f64 * a[i] as f64;
            nb += b[i] as f64 * b[i] as f64;
        }
        s / (na.sqrt() * nb.sqrt())
    }

    #[test]
    fn embed_is_deterministic_and_unit_norm() {
        let e = HashEmbedder::default();
        let a = e.embed("abc").unwrap();
        let b = e.embed("abc").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), EMBEDDING_DIM);
        for text in ["abc", "Who wrote Hamlet?", "a a a b", "???", "   ", "x"] {
            let v = e.embed(text).unwrap();
            assert!((l2_norm(v.as_slice()) - 1.0).abs() < 1e-5, "{text}");
        }
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(HashEmbedder::default().embed(""), Err(Error::EmptyInput)));
    }

    #[test]
    fn punctuation_only_text_falls_back_to_a_unit_vector() {
        let e = HashEmbedder::default();
        let a = e.embed("?!").unwrap();
        let b = e.embed("...").unwrap();
        assert_eq!(a.as_slice().iter().filter(|c| **c != 0.0).count(), 1);
        assert_eq!(a, e.embed("?!").unwrap());
        assert_ne!(a, b);
    }

    #[test]
    fn extra_token_stays_closer_than_unrelated_text() {
        let e = HashEmbedder::default();
        let q = e.embed("who wrote the play hamlet").unwrap();
        let q_plus = e.embed("who wrote the play hamlet originally").unwrap();
        let other = e.embed("boiling point of water at sea level").unwrap();
        let near = oracle_cosine(q.as_slice(), q_plus.as_slice());
        let far = oracle_cosine(q.as_slice(), other.as_slice());
        assert!(near > far, "near {near} far {far}");
        assert!((cosine(&q, &q_plus).unwrap() - near).abs() < 1e-12);
    }

    #[test]
    fn cosine_basics() {
        let v = HashEmbedder::default().embed("some text").unwrap();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-6);
        let e1 = EmbeddingVector::axis(8, 0);
        let e2 = EmbeddingVector::axis(8, 1);
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
        let e3 = EmbeddingVector::axis(4, 1);
        assert!(matches!(cosine(&e1, &e3), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn cosine_matches_scalar_loop_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let a: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = EmbeddingVector::normalized(a).unwrap();
            let b = EmbeddingVector::normalized(b).unwrap();
            let got = cosine(&a, &b).unwrap();
            assert!((got - oracle_cosine(a.as_slice(), b.as_slice())).abs() < 1e-6);
            assert_eq!(got, cosine(&b, &a).unwrap());
        }
    }

    #[test]
    fn invalid_vectors_are_rejected() {
        assert!(EmbeddingVector::new(vec![1.0, 1.0]).is_err());
        assert!(EmbeddingVector::new(vec![f32::NAN, 1.0]).is_err());
        assert!(EmbeddingVector::normalized(vec![0.0, 0.0]).is_err());
        assert!(EmbeddingVector::new(vec![]).is_err());
        let parsed: std::result::Result<EmbeddingVector, _> = serde_json::from_str("[3.0, 4.0]");
        assert!(parsed.is_err());
        let parsed: EmbeddingVector = serde_json::from_str("[0.6, 0.8]").unwrap();
        assert_eq!(parsed.dim(), 2);
    }

    #[test]
    fn tokenizer_splits_on_punctuation_and_lowercases() {
        assert_eq!(tokenize("Who wrote Hamlet?"), vec!["who", "wrote", "hamlet"]);
        assert_eq!(tokenize("state-of-the-art, 2024!"), vec!["state", "of", "the", "art", "2024"]);
        assert!(tokenize("  ?! ").is_empty());
    }
}
