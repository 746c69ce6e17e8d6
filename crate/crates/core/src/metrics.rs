//! Efficiency and quality metrics.
//!
//! Efficiency: GPU-seconds per query as the sum of wall time times
//! utilization over devices, queries per second as count over elapsed time,
//! and usage-weighted aggregates of per-layer figures. Latency statistics use
//! linear interpolation between closest ranks (`h = (n - 1) p`).
//!
//! Quality: faithfulness is supported claims over total claims; answer
//! relevancy is the mean cosine between embeddings of questions generated
//! from an answer and the embedding of the original input. Both delegate the
//! language-model part (claim extraction, question generation) to traits.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::model::{LayerOutcome, LayerTag};
use crate::router::{RouteTraceEvent, TraceRecord};

/// A value for each of the five layers, indexed by [`LayerTag`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PerLayer<T>(pub [T; 5]);

impl<T: Copy> PerLayer<T> {
    pub fn get(&self, layer: LayerTag) -> T {
        self.0[layer.index()]
    }

    pub fn set(&mut self, layer: LayerTag, value: T) {
        self.0[layer.index()] = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (LayerTag, T)> + '_ {
        LayerTag::ALL.into_iter().map(move |l| (l, self.get(l)))
    }
}

impl<T: Serialize + Copy> Serialize for PerLayer<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<LayerTag, T> = self.iter().collect();
        map.serialize(s)
    }
}

impl<'de, T: Deserialize<'de> + Copy + Default> Deserialize<'de> for PerLayer<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<LayerTag, T>::deserialize(d)?;
        let mut out = PerLayer::default();
        for layer in LayerTag::ALL {
            let v = map
                .get(&layer)
                .ok_or_else(|| serde::de::Error::custom(format!("missing layer {layer}")))?;
            out.set(layer, *v);
        }
        Ok(out)
    }
}

/// Per-layer GPU-seconds per query and throughput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCostModel {
    pub gpu_seconds_per_query: PerLayer<f64>,
    pub qps: PerLayer<f64>,
}

impl LayerCostModel {
    /// Reference per-layer measurements from a four-GPU deployment
    /// (8B-parameter generator, 1024-d embedder, flat cosine indices).
    pub fn reference() -> Self {
        Self {
            gpu_seconds_per_query: PerLayer([0.0, 9.4e-4, 0.25703, 0.53866, 0.53866]),
            qps: PerLayer([419_430.0, 208.33, 2.51, 1.81431, 0.45579]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (layer, c) in self.gpu_seconds_per_query.iter() {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("gpu cost for {layer} must be non-negative, got {c}")));
            }
        }
        for (layer, q) in self.qps.iter() {
            if !(q > 0.0 && q.is_finite()) {
                return Err(Error::Config(format!("qps for {layer} must be positive, got {q}")));
            }
        }
        Ok(())
    }
}

impl Default for LayerCostModel {
    fn default() -> Self {
        Self::reference()
    }
}

/// Share of served queries per layer; sums to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UsageRatios(pub PerLayer<f64>);

impl UsageRatios {
    /// Reference usage shares observed after warm-up.
    pub fn reference() -> Self {
        Self(PerLayer([0.244, 0.255, 0.078, 0.279, 0.144]))
    }

    pub fn get(&self, layer: LayerTag) -> f64 {
        self.0.get(layer)
    }

    pub fn sum(&self) -> f64 {
        self.0 .0.iter().sum()
    }
}

const RATIO_TOLERANCE: f64 = 1e-6;

fn check_ratios(ratios: &UsageRatios) -> Result<()> {
    let sum = ratios.sum();
    if (sum - 1.0).abs() > RATIO_TOLERANCE {
        return Err(Error::RatioMismatch { sum });
    }
    Ok(())
}

/// Usage-weighted GPU-seconds per query.
pub fn weighted_cost(model: &LayerCostModel, ratios: &UsageRatios) -> Result<f64> {
    check_ratios(ratios)?;
    Ok(LayerTag::ALL
        .iter()
        .map(|&l| model.gpu_seconds_per_query.get(l) * ratios.get(l))
        .sum())
}

/// Usage-weighted queries per second.
pub fn weighted_qps(model: &LayerCostModel, ratios: &UsageRatios) -> Result<f64> {
    check_ratios(ratios)?;
    Ok(LayerTag::ALL.iter().map(|&l| model.qps.get(l) * ratios.get(l)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSample {
    pub wall_time: f64,
    pub utilization: f64,
    pub device: u32,
}

impl CostSample {
    pub fn new(wall_time: f64, utilization: f64, device: u32) -> Result<Self> {
        if !(wall_time >= 0.0) || !(0.0..=1.0).contains(&utilization) {
            return Err(Error::Config(format!(
                "invalid cost sample: wall_time {wall_time}, utilization {utilization}"
            )));
        }
        Ok(Self {
            wall_time,
            utilization,
            device,
        })
    }
}

/// GPU-seconds consumed: sum of wall time times utilization.
pub fn gpu_time_per_query(samples: &[CostSample]) -> f64 {
    samples.iter().map(|s| s.wall_time * s.utilization).sum()
}

/// Produces device cost samples for one served query.
pub trait CostSampler {
    fn sample(&mut self, layer: LayerTag) -> Vec<CostSample>;
}

/// Spreads each layer's modeled GPU time across `devices` equally loaded GPUs.
#[derive(Debug, Clone)]
pub struct SyntheticCostSampler {
    pub model: LayerCostModel,
    pub devices: u32,
    pub utilization: f64,
}

impl CostSampler for SyntheticCostSampler {
    fn sample(&mut self, layer: LayerTag) -> Vec<CostSample> {
        let gpu = self.model.gpu_seconds_per_query.get(layer);
        let per_device = gpu / self.devices.max(1) as f64;
        (0..self.devices.max(1))
            .map(|d| CostSample {
                wall_time: per_device / self.utilization,
                utilization: self.utilization,
                device: d,
            })
            .collect()
    }
}

pub fn measure_qps(query_count: u64, elapsed_seconds: f64) -> Result<f64> {
    if !(elapsed_seconds > 0.0) {
        return Err(Error::ZeroElapsed);
    }
    Ok(query_count as f64 / elapsed_seconds)
}

/// QPS of a recorded trace: events over the span from the first query's issue
/// time to the last query's completion.
pub fn trace_qps(records: &[TraceRecord]) -> Result<f64> {
    let first = records.iter().map(|r| r.query.issued_at).min().ok_or(Error::EmptyTrace)?;
    let last = records.iter().map(|r| r.trace.timestamp).max().ok_or(Error::EmptyTrace)?;
    measure_qps(records.len() as u64, last.saturating_sub(first) as f64 / 1e9)
}

pub fn usage_ratio<'a>(trace: impl IntoIterator<Item = &'a RouteTraceEvent>) -> Result<UsageRatios> {
    let mut counts = [0u64; 5];
    for e in trace {
        counts[e.serving_layer.index()] += 1;
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyTrace);
    }
    Ok(UsageRatios(PerLayer(counts.map(|c| c as f64 / total as f64))))
}

/// Usage ratios from per-layer serving counts.
pub fn usage_from_counts(counts: &PerLayer<u64>) -> Result<UsageRatios> {
    let total: u64 = counts.0.iter().sum();
    if total == 0 {
        return Err(Error::EmptyTrace);
    }
    Ok(UsageRatios(PerLayer(counts.0.map(|c| c as f64 / total as f64))))
}

/// Linear-interpolation quantile of sorted data, `p` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub count: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub p5: f64,
    pub p95: f64,
    /// Samples outside `[p5, p95]`, ascending.
    pub outliers: Vec<f64>,
}

impl BoxStats {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyTrace);
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let p5 = quantile_sorted(&s, 0.05);
        let p95 = quantile_sorted(&s, 0.95);
        Ok(Self {
            count: s.len(),
            q1: quantile_sorted(&s, 0.25),
            median: quantile_sorted(&s, 0.5),
            q3: quantile_sorted(&s, 0.75),
            p5,
            p95,
            outliers: s.iter().copied().filter(|&x| x < p5 || x > p95).collect(),
        })
    }
}

/// Latency box statistics per serving layer. Layers that served nothing are absent.
pub fn latency_distribution<'a>(
    trace: impl IntoIterator<Item = &'a RouteTraceEvent>,
) -> Result<BTreeMap<LayerTag, BoxStats>> {
    let mut by_layer: BTreeMap<LayerTag, Vec<f64>> = BTreeMap::new();
    for e in trace {
        by_layer.entry(e.serving_layer).or_default().push(e.latency_seconds);
    }
    if by_layer.is_empty() {
        return Err(Error::EmptyTrace);
    }
    by_layer
        .into_iter()
        .map(|(l, xs)| Ok((l, BoxStats::from_samples(&xs)?)))
        .collect()
}

pub const WARMUP_WINDOW: usize = 100;
pub const WARMUP_LATENCY_CUTOFF_SECONDS: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupPoint {
    pub index: usize,
    pub mean: f64,
    pub q1: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupCurve {
    pub points: Vec<WarmupPoint>,
    /// Set when some session had fewer than the window of qualifying queries;
    /// the curve is then cut to the shortest session.
    pub insufficient_data: bool,
}

/// Warm-up curve: per session take the first 100 queries faster than 6 s,
/// sort them by descending latency, then at each rank aggregate across
/// sessions (mean and interquartile band).
pub fn warmup_curve(sessions: &[Vec<f64>]) -> Result<WarmupCurve> {
    if sessions.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let per_session: Vec<Vec<f64>> = sessions
        .iter()
        .map(|latencies| {
            let mut kept: Vec<f64> = latencies
                .iter()
                .copied()
                .filter(|&l| l < WARMUP_LATENCY_CUTOFF_SECONDS)
                .take(WARMUP_WINDOW)
                .collect();
            kept.sort_by(|a, b| b.total_cmp(a));
            kept
        })
        .collect();
    let len = per_session.iter().map(Vec::len).min().unwrap_or(0);
    let insufficient_data = len < WARMUP_WINDOW;
    if insufficient_data {
        tracing::warn!(len, "warm-up curve shortened: a session has too few qualifying queries");
    }
    let points = (0..len)
        .map(|i| {
            let mut column: Vec<f64> = per_session.iter().map(|s| s[i]).collect();
            column.sort_by(f64::total_cmp);
            WarmupPoint {
                index: i,
                mean: column.iter().sum::<f64>() / column.len() as f64,
                q1: quantile_sorted(&column, 0.25),
                q3: quantile_sorted(&column, 0.75),
            }
        })
        .collect();
    Ok(WarmupCurve {
        points,
        insufficient_data,
    })
}

/// Per-query latency model for simulation: each probed layer costs a base
/// time scaled by log-normal jitter `exp(sigma * z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticLatencyModel {
    /// Seconds when the layer answers.
    pub hit_seconds: PerLayer<f64>,
    /// Seconds when the layer is probed and does not answer.
    pub miss_seconds: PerLayer<f64>,
    pub sigma: f64,
}

impl SyntheticLatencyModel {
    /// Bases taken from the reference GPU-time figures. The KV-cache base is
    /// the reciprocal of its reference throughput, a rejected recall costs a
    /// full generation, and a layer-4/5 miss costs one semantic-cache-sized
    /// vector scan.
    pub fn from_cost_model(model: &LayerCostModel, sigma: f64) -> Self {
        let kv = 1.0 / model.qps.get(LayerTag::FixedKv);
        let sc = model.gpu_seconds_per_query.get(LayerTag::SemanticCache);
        let recall = model.gpu_seconds_per_query.get(LayerTag::MemoryRecall);
        let akm = model.gpu_seconds_per_query.get(LayerTag::AdaptiveMemory);
        let rag = model.gpu_seconds_per_query.get(LayerTag::NaiveRag);
        Self {
            hit_seconds: PerLayer([kv, sc, recall, akm, rag]),
            miss_seconds: PerLayer([kv, sc, recall, sc, sc]),
            sigma,
        }
    }

    pub fn sample(&self, layer: LayerTag, outcome: LayerOutcome, rng: &mut impl Rng) -> f64 {
        let base = match outcome {
            LayerOutcome::Hit => self.hit_seconds.get(layer),
            LayerOutcome::Miss | LayerOutcome::Rejected => self.miss_seconds.get(layer),
        };
        if self.sigma <= 0.0 {
            return base;
        }
        let jitter = LogNormal::new(0.0, self.sigma).expect("finite sigma");
        base * jitter.sample(rng)
    }
}

impl Default for SyntheticLatencyModel {
    fn default() -> Self {
        Self::from_cost_model(&LayerCostModel::reference(), 0.25)
    }
}

/// faithfulness = supported claims / total claims.
pub fn faithfulness(supported_claims: usize, total_claims: usize) -> Result<f64> {
    if total_claims == 0 {
        return Err(Error::NoClaims);
    }
    if supported_claims > total_claims {
        return Err(Error::ClaimCountMismatch {
            supported: supported_claims,
            total: total_claims,
        });
    }
    Ok(supported_claims as f64 / total_claims as f64)
}

/// Splits an answer into claims and judges each against the context.
pub trait ClaimExtractor {
    fn claims(&self, answer: &str) -> Vec<String>;
    fn is_supported(&self, claim: &str, context: &str) -> bool;
}

/// Sentences are claims; a claim is supported when its text, minus terminal
/// punctuation, occurs verbatim in the context.
#[derive(Debug, Clone, Copy, Default)]
pub struct SentenceClaimExtractor;

pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let boundary = chars.peek().is_none_or(|&(_, n)| n.is_whitespace());
            if boundary {
                let end = i + c.len_utf8();
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s.to_owned());
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_owned());
    }
    out
}

impl ClaimExtractor for SentenceClaimExtractor {
    fn claims(&self, answer: &str) -> Vec<String> {
        split_sentences(answer)
    }

    fn is_supported(&self, claim: &str, context: &str) -> bool {
        let core = claim.trim_end_matches(['.', '!', '?']).trim();
        !core.is_empty() && context.contains(core)
    }
}

pub fn faithfulness_of(extractor: &dyn ClaimExtractor, answer: &str, context: &str) -> Result<f64> {
    let claims = extractor.claims(answer);
    let supported = claims.iter().filter(|c| extractor.is_supported(c, context)).count();
    faithfulness(supported, claims.len())
}

#[derive(Debug, Clone)]
pub struct RelevancyInputs {
    pub input: EmbeddingVector,
    pub generated: Vec<EmbeddingVector>,
}

/// Mean cosine between each generated question and the input. May be
/// negative: cosines of arbitrary vectors lie in `[-1, 1]`.
pub fn answer_relevancy(inputs: &RelevancyInputs) -> Result<f64> {
    if inputs.generated.is_empty() {
        return Err(Error::Config("answer relevancy needs at least one generated question".into()));
    }
    let mut total = 0.0;
    for g in &inputs.generated {
        total += cosine(g, &inputs.input)?;
    }
    Ok(total / inputs.generated.len() as f64)
}

/// Produces the questions an answer would be a response to.
pub trait QuestionGenerator {
    fn questions(&self, answer: &str) -> Vec<String>;
}

/// Uses the answer's own sentences as the generated questions.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityQuestionGenerator;

impl QuestionGenerator for IdentityQuestionGenerator {
    fn questions(&self, answer: &str) -> Vec<String> {
        split_sentences(answer)
    }
}

pub fn answer_relevancy_of(
    generator: &dyn QuestionGenerator,
    embedder: &dyn Embedder,
    user_input: &str,
    answer: &str,
) -> Result<f64> {
    let questions = generator.questions(answer);
    let generated = questions.iter().map(|q| embedder.embed(q)).collect::<Result<Vec<_>>>()?;
    answer_relevancy(&RelevancyInputs {
        input: embedder.embed(user_input)?,
        generated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gpu_time_basics() {
        assert_eq!(gpu_time_per_query(&[CostSample::new(2.0, 0.5, 0).unwrap()]), 1.0);
        assert_eq!(gpu_time_per_query(&[]), 0.0);
        assert!(CostSample::new(-1.0, 0.5, 0).is_err());
        assert!(CostSample::new(1.0, 1.5, 0).is_err());
    }

    #[test]
    fn synthetic_sampler_reproduces_layer_cost() {
        let mut s = SyntheticCostSampler {
            model: LayerCostModel::reference(),
            devices: 4,
            utilization: 0.9,
        };
        for layer in LayerTag::ALL {
            let got = gpu_time_per_query(&s.sample(layer));
            let want = LayerCostModel::reference().gpu_seconds_per_query.get(layer);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_cost_identities() {
        let zero = LayerCostModel {
            gpu_seconds_per_query: PerLayer([0.0; 5]),
            qps: PerLayer([1.0; 5]),
        };
        assert_eq!(weighted_cost(&zero, &UsageRatios::reference()).unwrap(), 0.0);
        let flat = LayerCostModel {
            gpu_seconds_per_query: PerLayer([0.3; 5]),
            qps: PerLayer([1.0; 5]),
        };
        let uniform = UsageRatios(PerLayer([0.2; 5]));
        assert!((weighted_cost(&flat, &uniform).unwrap() - 0.3).abs() < 1e-12);
        let bad = UsageRatios(PerLayer([0.2, 0.2, 0.2, 0.2, 0.1]));
        assert!(matches!(weighted_cost(&flat, &bad), Err(Error::RatioMismatch { .. })));
    }

    #[test]
    fn weighted_qps_single_layer() {
        let ratios = UsageRatios(PerLayer([0.0, 0.0, 1.0, 0.0, 0.0]));
        let got = weighted_qps(&LayerCostModel::reference(), &ratios).unwrap();
        assert_eq!(got, 2.51);
    }

    #[test]
    fn weighting_is_linear_in_costs() {
        let m = LayerCostModel::reference();
        let doubled = LayerCostModel {
            gpu_seconds_per_query: PerLayer(m.gpu_seconds_per_query.0.map(|c| c * 2.0)),
            qps: PerLayer(m.qps.0.map(|q| q * 2.0)),
        };
        let r = UsageRatios::reference();
        assert_eq!(weighted_cost(&doubled, &r).unwrap(), 2.0 * weighted_cost(&m, &r).unwrap());
        assert_eq!(weighted_qps(&doubled, &r).unwrap(), 2.0 * weighted_qps(&m, &r).unwrap());
    }

    #[test]
    fn qps_measurement() {
        assert_eq!(measure_qps(100, 10.0).unwrap(), 10.0);
        assert_eq!(measure_qps(0, 5.0).unwrap(), 0.0);
        assert!(matches!(measure_qps(5, 0.0), Err(Error::ZeroElapsed)));
    }

    #[test]
    fn quantiles_of_one_to_hundred() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        let b = BoxStats::from_samples(&xs).unwrap();
        // h = 99 p: median h = 49.5 -> 50.5; p5 h = 4.95 -> 5.95; p95 h = 94.05 -> 95.05.
        assert!((b.median - 50.5).abs() < 1e-12);
        assert!((b.p5 - 5.95).abs() < 1e-12);
        assert!((b.p95 - 95.05).abs() < 1e-12);
        assert!((b.q1 - 25.75).abs() < 1e-12);
        assert!((b.q3 - 75.25).abs() < 1e-12);
        assert_eq!(b.outliers, vec![1.0, 2.0, 3.0, 4.0, 5.0, 96.0, 97.0, 98.0, 99.0, 100.0]);
    }

    #[test]
    fn single_sample_stats_collapse() {
        let b = BoxStats::from_samples(&[3.5]).unwrap();
        assert_eq!((b.q1, b.median, b.q3, b.p5, b.p95), (3.5, 3.5, 3.5, 3.5, 3.5));
        assert!(b.outliers.is_empty());
        assert!(BoxStats::from_samples(&[]).is_err());
    }

    #[test]
    fn warmup_constant_latency_is_flat() {
        let c = warmup_curve(&[vec![1.0; 150]]).unwrap();
        assert_eq!(c.points.len(), 100);
        assert!(!c.insufficient_data);
        assert!(c.points.iter().all(|p| p.mean == 1.0 && p.q1 == 1.0 && p.q3 == 1.0));
    }

    #[test]
    fn warmup_excludes_slow_queries() {
        let mut lat = Vec::new();
        for i in 0..120 {
            lat.push(if i % 3 == 0 { 6.5 } else { 1.0 + i as f64 / 1000.0 });
        }
        let c = warmup_curve(&[lat]).unwrap();
        assert_eq!(c.points.len(), 80);
        assert!(c.insufficient_data);
        assert!(c.points.iter().all(|p| p.mean < 6.0));
        let exactly_six = warmup_curve(&[vec![6.0; 10]]).unwrap();
        assert!(exactly_six.points.is_empty());
    }

    #[test]
    fn faithfulness_formula() {
        assert_eq!(faithfulness(3, 4).unwrap(), 0.75);
        assert_eq!(faithfulness(0, 7).unwrap(), 0.0);
        assert!(matches!(faithfulness(0, 0), Err(Error::NoClaims)));
        assert!(faithfulness(5, 4).is_err());
    }

    #[test]
    fn sentence_extractor_fixture() {
        let context = "The Danube flows through Vienna. It is Europe's second-longest river. \
                       It rises in the Black Forest.";
        let answer = "The Danube flows through Vienna. It empties into the Black Sea! \
                      It is Europe's second-longest river. Vienna is in Germany?";
        // Hand count: sentences 1 and 3 appear verbatim in the context, 2 and 4 do not.
        let f = faithfulness_of(&SentenceClaimExtractor, answer, context).unwrap();
        assert_eq!(f, 0.5);
        assert!(faithfulness_of(&SentenceClaimExtractor, "   ", context).is_err());
    }

    #[test]
    fn sentence_split_ignores_inner_dots() {
        assert_eq!(
            split_sentences("Version 2.5 shipped. Next is 3.0"),
            vec!["Version 2.5 shipped.", "Next is 3.0"]
        );
    }

    #[test]
    fn relevancy_identities() {
        let e = HashEmbedder::default();
        let q = e.embed("what is the capital of france").unwrap();
        let r = answer_relevancy(&RelevancyInputs {
            input: q.clone(),
            generated: vec![q.clone()],
        })
        .unwrap();
        assert!((r - 1.0).abs() < 1e-6);

        let input = EmbeddingVector::axis(2, 0);
        let g1 = EmbeddingVector::normalized(vec![0.8, 0.6]).unwrap();
        let g2 = EmbeddingVector::normalized(vec![0.6, 0.8]).unwrap();
        let r = answer_relevancy(&RelevancyInputs {
            input,
            generated: vec![g1, g2],
        })
        .unwrap();
        assert!((r - 0.7).abs() < 1e-7);
    }

    #[test]
    fn relevancy_through_generator() {
        let e = HashEmbedder::default();
        let r = answer_relevancy_of(&IdentityQuestionGenerator, &e, "capital of france", "Capital of France.").unwrap();
        assert!((r - 1.0).abs() < 1e-6);
    }

    #[test]
    fn latency_model_without_jitter_returns_bases() {
        let m = SyntheticLatencyModel::from_cost_model(&LayerCostModel::reference(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(m.sample(LayerTag::NaiveRag, LayerOutcome::Hit, &mut rng), 0.53866);
        assert_eq!(m.sample(LayerTag::MemoryRecall, LayerOutcome::Rejected, &mut rng), 0.25703);
        assert!(m.sample(LayerTag::FixedKv, LayerOutcome::Hit, &mut rng) < 1e-5);
    }

    #[test]
    fn per_layer_serializes_as_named_map() {
        let json = serde_json::to_string(&UsageRatios::reference()).unwrap();
        assert!(json.contains("\"fixed_kv\":0.244"));
        let back: UsageRatios = serde_json::from_str(&json).unwrap();
        assert_eq!(back, UsageRatios::reference());
        assert!(serde_json::from_str::<UsageRatios>("{\"fixed_kv\":1.0}").is_err());
    }
}
