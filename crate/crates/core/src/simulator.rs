//! Multi-session workload simulation.
//!
//! Each session starts from empty caches and an empty adaptive memory. Query
//! `i` of `N` replays a previously served question with a probability that
//! ramps from 0 to 1. A replay is sent either verbatim or lightly
//! perturbed. All other queries draw an unused question from the dataset.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{tokenize, Embedder};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::knowledge::{CorpusLine, MainKnowledgeBase};
use crate::llm::{GenerationBackend, StubBackend, StubKnowledgeTable, STUB_LEARNED_CONFIDENCE};
use crate::metrics::SyntheticLatencyModel;
use crate::model::{QueryOrigin, SessionId};
use crate::router::{PentaRag, RouteTraceEvent, RouterConfig, TraceRecord};

/// Replay probability as a function of position within a session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RampSchedule {
    /// `i / (N - 1)`.
    Linear,
    /// The linear ramp quantized into `steps` flat levels from 0 to 1.
    Step { steps: usize },
    /// A logistic curve centred mid-session, rescaled to hit 0 and 1 at the ends.
    Sigmoid { steepness: f64 },
}

impl Default for RampSchedule {
    fn default() -> Self {
        RampSchedule::Linear
    }
}

impl RampSchedule {
    pub fn probability(&self, i: usize, n: usize) -> f64 {
        if n < 2 {
            return 0.0;
        }
        let x = (i.min(n - 1)) as f64 / (n - 1) as f64;
        let p = match *self {
            RampSchedule::Linear => x,
            RampSchedule::Step { steps } => {
                if steps < 2 {
                    x
                } else {
                    let level = (i.min(n - 1) * steps / n).min(steps - 1);
                    level as f64 / (steps - 1) as f64
                }
            }
            RampSchedule::Sigmoid { steepness } => {
                let s = |t: f64| 1.0 / (1.0 + (-steepness * (t - 0.5)).exp());
                let (lo, hi) = (s(0.0), s(1.0));
                if hi - lo <= f64::EPSILON {
                    x
                } else {
                    (s(x) - lo) / (hi - lo)
                }
            }
        };
        p.clamp(0.0, 1.0)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            RampSchedule::Step { steps } if steps < 2 => Err(Error::Config("step ramp needs at least 2 steps".into())),
            RampSchedule::Sigmoid { steepness } if !(steepness.is_finite() && steepness > 0.0) => {
                Err(Error::Config(format!("sigmoid steepness {steepness} must be positive")))
            }
            _ => Ok(()),
        }
    }
}

/// Linear replay ramp: 0 for the first query, 1 for the last.
pub fn replay_probability(i: usize, n: usize) -> f64 {
    RampSchedule::Linear.probability(i, n)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturberKind {
    /// One of the three edits below, chosen uniformly.
    #[default]
    Composite,
    SwapAdjacent,
    DropStopWord,
    ToggleTerminal,
}

const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "of", "in", "on", "at", "to", "for", "by", "with", "from", "and", "or", "is", "was", "are",
    "were", "be", "been", "did", "does", "do", "that", "this", "which", "as", "into", "its", "it",
];

fn toggle_terminal(text: &str) -> String {
    match text.strip_suffix('?') {
        Some(rest) => rest.to_owned(),
        None => format!("{text}?"),
    }
}

fn swap_adjacent(words: &[&str], rng: &mut impl Rng) -> Option<String> {
    let candidates: Vec<usize> = (0..words.len().saturating_sub(1))
        .filter(|&i| words[i] != words[i + 1])
        .collect();
    let &i = candidates.choose(rng)?;
    let mut out = words.to_vec();
    out.swap(i, i + 1);
    Some(out.join(" "))
}

fn drop_stop_word(words: &[&str], rng: &mut impl Rng) -> Option<String> {
    if words.len() < 4 {
        return None;
    }
    let candidates: Vec<usize> = (0..words.len())
        .filter(|&i| {
            let t = tokenize(words[i]);
            t.len() == 1 && STOP_WORDS.contains(&t[0].as_str())
        })
        .collect();
    let &i = candidates.choose(rng)?;
    let mut out = words.to_vec();
    out.remove(i);
    Some(out.join(" "))
}

/// Applies one small edit to `text`. The result always differs from the
/// input; when the chosen edit cannot apply, terminal `?` is toggled instead.
pub fn perturb(text: &str, kind: PerturberKind, rng: &mut impl Rng) -> String {
    let kind = match kind {
        PerturberKind::Composite => [
            PerturberKind::SwapAdjacent,
            PerturberKind::DropStopWord,
            PerturberKind::ToggleTerminal,
        ][rng.random_range(0..3)],
        k => k,
    };
    let words: Vec<&str> = text.split_whitespace().collect();
    let edited = match kind {
        PerturberKind::SwapAdjacent => swap_adjacent(&words, rng),
        PerturberKind::DropStopWord => drop_stop_word(&words, rng),
        _ => None,
    };
    match edited {
        Some(s) if s != text => s,
        _ => toggle_terminal(text),
    }
}

/// Shared-token fraction of two texts: multiset intersection over the longer
/// token list. Two token-free texts count as identical.
pub fn token_overlap(a: &str, b: &str) -> f64 {
    let (ta, tb) = (tokenize(a), tokenize(b));
    let longest = ta.len().max(tb.len());
    if longest == 0 {
        return 1.0;
    }
    let mut rest = tb.clone();
    let mut shared = 0usize;
    for t in &ta {
        if let Some(pos) = rest.iter().position(|x| x == t) {
            rest.swap_remove(pos);
            shared += 1;
        }
    }
    shared as f64 / longest as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_sessions: usize,
    pub queries_per_session: usize,
    /// Share of replays sent verbatim; the rest are perturbed.
    pub replay_split: f64,
    pub ramp: RampSchedule,
    pub perturber: PerturberKind,
    pub seed: u64,
    /// Share of dataset questions the stub backend already knows, so memory
    /// recall has something to serve from the first query.
    pub prior_recall_fraction: f64,
    pub latency: SyntheticLatencyModel,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_sessions: 9,
            queries_per_session: 1000,
            replay_split: 0.5,
            ramp: RampSchedule::Linear,
            perturber: PerturberKind::Composite,
            seed: 0,
            prior_recall_fraction: 0.1,
            latency: SyntheticLatencyModel::default(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sessions == 0 {
            return Err(Error::Config("n_sessions must be at least 1".into()));
        }
        if self.queries_per_session < 2 {
            return Err(Error::Config("queries_per_session must be at least 2".into()));
        }
        for (name, p) in [
            ("replay_split", self.replay_split),
            ("prior_recall_fraction", self.prior_recall_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if !(self.latency.sigma.is_finite() && self.latency.sigma >= 0.0) {
            return Err(Error::Config("latency sigma must be finite and non-negative".into()));
        }
        self.ramp.validate()
    }
}

fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-session question source: the unused fresh questions plus every
/// distinct text served so far.
#[derive(Debug, Clone)]
pub struct WorkloadState {
    fresh: Vec<String>,
    past: Vec<String>,
    seen: HashSet<String>,
    replay_split: f64,
    perturber: PerturberKind,
    served: usize,
}

impl WorkloadState {
    /// `questions` are shuffled once; fresh draws then pop from the shuffled
    /// list, which is a uniform draw without replacement.
    pub fn new(questions: &[String], replay_split: f64, perturber: PerturberKind, rng: &mut impl Rng) -> Self {
        let mut fresh = questions.to_vec();
        fresh.shuffle(rng);
        Self {
            fresh,
            past: Vec::new(),
            seen: HashSet::new(),
            replay_split,
            perturber,
            served: 0,
        }
    }

    pub fn past(&self) -> &[String] {
        &self.past
    }

    pub fn fresh_remaining(&self) -> usize {
        self.fresh.len()
    }

    /// Draws the next question given the current replay probability.
    pub fn draw(&mut self, p: f64, rng: &mut impl Rng) -> Result<(String, QueryOrigin)> {
        if !self.past.is_empty() && rng.random_bool(p.clamp(0.0, 1.0)) {
            let picked = self.past.choose(rng).expect("non-empty").clone();
            return Ok(if rng.random_bool(self.replay_split) {
                (picked, QueryOrigin::ExactReplay)
            } else {
                (perturb(&picked, self.perturber, rng), QueryOrigin::PerturbedReplay)
            });
        }
        match self.fresh.pop() {
            Some(q) => Ok((q, QueryOrigin::Fresh)),
            None => Err(Error::PoolExhausted { served: self.served }),
        }
    }

    /// Records a served question so later queries can replay it.
    pub fn remember(&mut self, text: &str) {
        self.served += 1;
        if self.seen.insert(text.to_owned()) {
            self.past.push(text.to_owned());
        }
    }
}

/// One row of a QA dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRow {
    pub question: String,
    pub answer: String,
    pub context: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub rows: Vec<QaRow>,
}

#[derive(Deserialize)]
#[serde(rename_all = "PascalCase")]
struct TriviaFile {
    data: Vec<TriviaRow>,
}

#[derive(Deserialize)]
#[serde(rename_all = "PascalCase")]
struct TriviaRow {
    question: String,
    answer: TriviaAnswer,
    #[serde(default)]
    search_results: Vec<TriviaSnippet>,
    #[serde(default)]
    entity_pages: Vec<TriviaSnippet>,
}

#[derive(Deserialize)]
#[serde(rename_all = "PascalCase")]
struct TriviaAnswer {
    value: String,
}

#[derive(Deserialize)]
#[serde(rename_all = "PascalCase")]
struct TriviaSnippet {
    #[serde(default)]
    description: Option<String>,
}

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "tor", "va", "zel", "qui", "dra", "fen", "mor", "sil", "bex", "nar", "ul", "pry", "gos",
    "thi", "wen", "cal", "dor", "ix", "jun", "rho",
];
const KINDS: &[&str] = &["city", "river", "mountain", "island", "festival", "dynasty", "comet", "treaty"];
const REGIONS: &[&str] = &["northern", "southern", "eastern", "western", "central", "coastal"];
const ATTRIBUTES: &[(&str, &[&str])] = &[
    ("founder", &["Ada Morrow", "Ivo Stane", "Lena Quist", "Tomas Brell", "Rhea Vance"]),
    ("oldest record", &["the Brass Ledger", "the Salt Codex", "the River Scroll", "the Ember Tablet"]),
    ("population", &["twelve thousand", "four million", "nine hundred", "sixty thousand"]),
    ("elevation", &["2,400 metres", "310 metres", "5,120 metres", "88 metres"]),
    ("patron animal", &["the heron", "the lynx", "the ibis", "the bison", "the otter"]),
    ("main export", &["copper", "indigo", "amber", "saffron", "timber"]),
    ("discovery year", &["1742", "1815", "1903", "1288", "1660"]),
];
const TEMPLATES: &[&str] = &[
    "What is the {attr} of {name}?",
    "Which {attr} belongs to {name}?",
    "Can you tell me the {attr} of {name}?",
    "Name the {attr} of {name}.",
];

/// Three capitalized pseudo-words, none of which appeared in an earlier name.
fn synthetic_name(rng: &mut impl Rng, used: &mut HashSet<String>) -> String {
    let mut words = Vec::with_capacity(3);
    while words.len() < 3 {
        let n = rng.random_range(2..=4);
        let mut w: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
        if !used.insert(w.clone()) {
            continue;
        }
        w[..1].make_ascii_uppercase();
        words.push(w);
    }
    words.join(" ")
}

impl Dataset {
    pub fn load(path: &Path, lenient: bool) -> Result<Self> {
        let rows: Vec<QaRow> = jsonl::read_jsonl_file(path, lenient)?;
        Ok(Self { rows })
    }

    /// Reads a TriviaQA-style JSON file (`{"Data": [...]}`), using search
    /// result and entity page descriptions as context. Rows without any
    /// context are skipped.
    pub fn load_triviaqa(path: &Path, limit: Option<usize>) -> Result<Self> {
        let file: TriviaFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        let rows = file
            .data
            .into_iter()
            .filter_map(|r| {
                let context = r
                    .search_results
                    .iter()
                    .chain(&r.entity_pages)
                    .filter_map(|s| s.description.as_deref())
                    .filter(|d| !d.trim().is_empty())
                    .collect::<Vec<_>>()
                    .join(" ");
                (!context.is_empty() && !r.question.trim().is_empty()).then(|| QaRow {
                    question: r.question,
                    answer: r.answer.value,
                    context,
                })
            })
            .take(limit.unwrap_or(usize::MAX))
            .collect();
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_jsonl_file(path, &self.rows)
    }

    /// A reproducible fictional QA dataset with unique questions. Each
    /// context names its entity and states the answer.
    pub fn synthetic(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::new();
        let mut used = HashSet::new();
        let mut rows = Vec::with_capacity(n);
        while rows.len() < n {
            let name = synthetic_name(&mut rng, &mut used);
            let (attr, values) = *ATTRIBUTES.choose(&mut rng).expect("non-empty");
            let question = TEMPLATES
                .choose(&mut rng)
                .expect("non-empty")
                .replace("{attr}", attr)
                .replace("{name}", &name);
            if !seen.insert(question.clone()) {
                continue;
            }
            let answer = (*values.choose(&mut rng).expect("non-empty")).to_owned();
            let kind = KINDS.choose(&mut rng).expect("non-empty");
            let region = REGIONS.choose(&mut rng).expect("non-empty");
            let context = format!("{name} is a {kind} in the {region} reaches. Its {attr} is {answer}.");
            rows.push(QaRow {
                question,
                answer,
                context,
            });
        }
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn questions(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.question.clone()).collect()
    }

    /// One passage per row, annotated with the row's answer.
    pub fn corpus_lines(&self, source: &str) -> Vec<CorpusLine> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| CorpusLine {
                id: format!("row-{i}"),
                text: r.context.clone(),
                source: source.to_owned(),
                answer: Some(r.answer.clone()),
            })
            .collect()
    }

    /// A recall table holding a reproducible `fraction` of the questions.
    pub fn prior_knowledge(&self, fraction: f64, seed: u64) -> StubKnowledgeTable {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, u64::MAX));
        let mut order: Vec<usize> = (0..self.rows.len()).collect();
        order.shuffle(&mut rng);
        let take = (fraction.clamp(0.0, 1.0) * self.rows.len() as f64).round() as usize;
        let mut table = StubKnowledgeTable::new();
        for &i in &order[..take] {
            let r = &self.rows[i];
            table.insert(r.question.clone(), r.answer.clone(), STUB_LEARNED_CONFIDENCE);
        }
        table
    }
}

/// The shared parts of a simulated deployment. Each session gets its own
/// router (so its own caches and adaptive memory) over these.
#[derive(Clone)]
pub struct SimulationSystem {
    pub embedder: Arc<dyn Embedder>,
    pub backend: Arc<dyn GenerationBackend>,
    pub knowledge_base: Arc<MainKnowledgeBase>,
    pub router: RouterConfig,
}

impl SimulationSystem {
    /// Ingests the dataset contexts and builds a stub backend that already
    /// knows `config.prior_recall_fraction` of the questions.
    pub fn from_dataset(
        dataset: &Dataset,
        embedder: Arc<dyn Embedder>,
        router: RouterConfig,
        config: &SimulationConfig,
    ) -> Result<Self> {
        let kb = MainKnowledgeBase::new(embedder.dim(), "dataset");
        kb.ingest(embedder.as_ref(), &dataset.corpus_lines("dataset"), 0)?;
        let backend = StubBackend::new(dataset.prior_knowledge(config.prior_recall_fraction, config.seed));
        Ok(Self {
            embedder,
            backend: Arc::new(backend),
            knowledge_base: Arc::new(kb),
            router,
        })
    }
}

/// The trace of one session, one record per query in issue order.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub session_id: SessionId,
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginCounts {
    pub fresh: usize,
    pub exact_replay: usize,
    pub perturbed_replay: usize,
}

impl SessionLog {
    pub fn events(&self) -> impl Iterator<Item = &RouteTraceEvent> {
        self.records.iter().map(|r| &r.trace)
    }

    pub fn latencies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.trace.latency_seconds).collect()
    }

    pub fn origin_counts(&self) -> OriginCounts {
        let mut c = OriginCounts::default();
        for r in &self.records {
            match r.origin {
                Some(QueryOrigin::Fresh) => c.fresh += 1,
                Some(QueryOrigin::ExactReplay) => c.exact_replay += 1,
                Some(QueryOrigin::PerturbedReplay) => c.perturbed_replay += 1,
                None => {}
            }
        }
        c
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        jsonl::write_jsonl_file(path, &self.records)
    }

    pub fn read_jsonl(path: &Path, lenient: bool) -> Result<Self> {
        let records: Vec<TraceRecord> = jsonl::read_jsonl_file(path, lenient)?;
        let session_id = match records.first() {
            Some(r) => r.query.session_id.clone(),
            None => SessionId::new(path.file_stem().and_then(|s| s.to_str()).unwrap_or_default()),
        };
        Ok(Self { session_id, records })
    }
}

/// Writes `session_{i}.jsonl` per log into `dir`.
pub fn write_session_logs(dir: &Path, logs: &[SessionLog]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    logs.iter()
        .enumerate()
        .map(|(i, log)| {
            let path = dir.join(format!("session_{i}.jsonl"));
            log.write_jsonl(&path)?;
            Ok(path)
        })
        .collect()
}

/// Reads every `*.jsonl` file in `dir`, ordered by the number in its name
/// and then by name.
pub fn read_session_logs(dir: &Path, lenient: bool) -> Result<Vec<SessionLog>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    let key = |p: &PathBuf| {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
        let digits: String = stem.chars().filter(char::is_ascii_digit).collect();
        (digits.parse::<u64>().unwrap_or(u64::MAX), stem)
    };
    paths.sort_by_key(key);
    paths.iter().map(|p| SessionLog::read_jsonl(p, lenient)).collect()
}

/// Runs one session on a fresh router.
pub fn run_session(
    config: &SimulationConfig,
    system: &SimulationSystem,
    questions: &[String],
    session_index: usize,
) -> Result<SessionLog> {
    let router_config = RouterConfig {
        deterministic_settle: true,
        ..system.router.clone()
    };
    let router = PentaRag::builder(system.embedder.clone(), system.backend.clone(), system.knowledge_base.clone())
        .config(router_config)
        .synthetic_latency(config.latency.clone(), mix(config.seed, 2 * session_index as u64 + 1))
        .build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 2 * session_index as u64));
    let mut state = WorkloadState::new(questions, config.replay_split, config.perturber, &mut rng);
    let session_id = SessionId::new(format!("session-{session_index}"));
    let n = config.queries_per_session;
    for i in 0..n {
        let p = config.ramp.probability(i, n);
        let (text, origin) = state.draw(p, &mut rng)?;
        let query = router.make_query(&text, &session_id)?;
        router.route_with_origin(&query, Some(origin))?;
        state.remember(&text);
    }
    Ok(SessionLog {
        session_id,
        records: router.take_log(),
    })
}

/// Runs `config.n_sessions` independent sessions in order.
pub fn run_simulation(config: &SimulationConfig, system: &SimulationSystem, questions: &[String]) -> Result<Vec<SessionLog>> {
    config.validate()?;
    (0..config.n_sessions)
        .map(|s| {
            let log = run_session(config, system, questions, s)?;
            tracing::debug!(session = s, queries = log.records.len(), "session finished");
            Ok(log)
        })
        .collect()
}

/// Writes the dataset as a JSONL stream to `out`.
pub fn write_dataset(dataset: &Dataset, out: impl Write) -> Result<()> {
    let mut out = BufWriter::new(out);
    jsonl::write_jsonl(&mut out, &dataset.rows)?;
    out.flush()?;
    Ok(())
}
