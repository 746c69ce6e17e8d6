//! Batch subcommands: ingest, simulate, report, export-triples, gen-dataset.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pentarag::index::Snapshot;
use pentarag::jsonl;
use pentarag::knowledge::{CorpusLine, MainKnowledgeBase};
use pentarag::metrics::{
    latency_distribution, trace_qps, usage_ratio, warmup_curve, weighted_cost, weighted_qps, LayerCostModel,
    UsageRatios,
};
use pentarag::model::{Clock, LayerTag, MonotonicClock, TrainingTriple};
use pentarag::router::{export_triples as triples_of, TraceRecord};
use pentarag::simulator::{read_session_logs, run_simulation, write_session_logs, Dataset, SessionLog, SimulationSystem};
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;

/// File stem of the persisted main knowledge base.
pub const KB_SNAPSHOT: &str = "main_kb";

/// Restores the knowledge base from `dir` when a snapshot is there, else
/// starts empty.
pub fn load_kb(dir: Option<&Path>, dim: usize) -> Result<MainKnowledgeBase> {
    if let Some(dir) = dir {
        if dir.join(format!("{KB_SNAPSHOT}.idx")).exists() {
            let snapshot = Snapshot::read_from(dir, KB_SNAPSHOT)?;
            let kb = MainKnowledgeBase::restore(&snapshot, KB_SNAPSHOT)
                .with_context(|| format!("restoring knowledge base from {}", dir.display()))?;
            anyhow::ensure!(kb.dim() == dim, "snapshot dimension {} != embedder dimension {dim}", kb.dim());
            return Ok(kb);
        }
    }
    Ok(MainKnowledgeBase::new(dim, KB_SNAPSHOT))
}

pub fn save_kb(kb: &MainKnowledgeBase, dir: &Path) -> Result<()> {
    kb.snapshot()?.write_to(dir, KB_SNAPSHOT)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub added: usize,
    pub total: usize,
}

/// Embeds a corpus JSONL file into the persisted knowledge base.
pub fn ingest(config: &ServiceConfig, corpus: &Path, snapshot_dir: &Path) -> Result<IngestReport> {
    let embedder = config.build_embedder();
    let kb = load_kb(Some(snapshot_dir), embedder.dim())?;
    let lines: Vec<CorpusLine> = jsonl::read_jsonl_file(corpus, config.lenient)?;
    let added = kb.ingest(embedder.as_ref(), &lines, MonotonicClock.now_ns())?;
    save_kb(&kb, snapshot_dir)?;
    Ok(IngestReport { added, total: kb.len() })
}

/// Runs the configured simulation and writes `session_{i}.jsonl` files.
/// Without a dataset file, a synthetic dataset of `synthetic_size` rows is used.
pub fn simulate(
    config: &ServiceConfig,
    dataset: Option<&Path>,
    synthetic_size: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let data = match dataset {
        Some(p) => Dataset::load(p, config.lenient).with_context(|| format!("loading {}", p.display()))?,
        None => Dataset::synthetic(synthetic_size, config.simulation.seed),
    };
    anyhow::ensure!(!data.is_empty(), "dataset is empty");
    let system = SimulationSystem::from_dataset(&data, config.build_embedder(), config.router.clone(), &config.simulation)?;
    let logs = run_simulation(&config.simulation, &system, &data.questions())?;
    Ok(write_session_logs(out_dir, &logs)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub sessions: usize,
    pub queries: usize,
    pub usage_ratios: UsageRatios,
    /// Cost model weighted by the observed usage ratios.
    pub weighted_gpu_s_per_query: f64,
    pub weighted_qps: f64,
    /// Mean over sessions of queries per simulated second.
    pub trace_qps: f64,
    pub warmup_points: usize,
    pub warmup_insufficient_data: bool,
}

/// Reads session logs from `log_dir` and writes `warmup.csv`, `boxplot.csv`,
/// `usage.csv` and `summary.json` into `out_dir`.
pub fn report(log_dir: &Path, out_dir: &Path, cost_model: &LayerCostModel, lenient: bool) -> Result<ReportSummary> {
    let logs = read_session_logs(log_dir, lenient)?;
    anyhow::ensure!(!logs.is_empty(), "no session logs in {}", log_dir.display());
    std::fs::create_dir_all(out_dir)?;

    let curve = warmup_curve(&logs.iter().map(SessionLog::latencies).collect::<Vec<_>>())?;
    let mut warm = String::from("index,mean,q1,q3\n");
    for p in &curve.points {
        writeln!(warm, "{},{},{},{}", p.index, p.mean, p.q1, p.q3)?;
    }
    std::fs::write(out_dir.join("warmup.csv"), warm)?;

    let events: Vec<_> = logs.iter().flat_map(SessionLog::events).collect();
    let boxes = latency_distribution(events.iter().copied())?;
    let mut boxplot = String::from("layer,count,q1,median,q3,p5,p95\n");
    for (layer, b) in &boxes {
        writeln!(boxplot, "{layer},{},{},{},{},{},{}", b.count, b.q1, b.median, b.q3, b.p5, b.p95)?;
    }
    std::fs::write(out_dir.join("boxplot.csv"), boxplot)?;

    let ratios = usage_ratio(events.iter().copied())?;
    let mut usage = String::from("layer,ratio\n");
    for layer in LayerTag::ALL {
        writeln!(usage, "{layer},{}", ratios.get(layer))?;
    }
    std::fs::write(out_dir.join("usage.csv"), usage)?;

    let qps: Vec<f64> = logs.iter().filter_map(|l| trace_qps(&l.records).ok()).collect();
    let summary = ReportSummary {
        sessions: logs.len(),
        queries: events.len(),
        usage_ratios: ratios,
        weighted_gpu_s_per_query: weighted_cost(cost_model, &ratios)?,
        weighted_qps: weighted_qps(cost_model, &ratios)?,
        trace_qps: if qps.is_empty() { 0.0 } else { qps.iter().sum::<f64>() / qps.len() as f64 },
        warmup_points: curve.points.len(),
        warmup_insufficient_data: curve.insufficient_data,
    };
    std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Exports training triples from one log file or every log in a directory.
pub fn export_triples(input: &Path, out: &Path, lenient: bool) -> Result<usize> {
    let records: Vec<TraceRecord> = if input.is_dir() {
        read_session_logs(input, lenient)?.into_iter().flat_map(|l| l.records).collect()
    } else {
        jsonl::read_jsonl_file(input, lenient)?
    };
    let triples: Vec<TrainingTriple> = triples_of(&records);
    jsonl::write_jsonl_file(out, &triples)?;
    Ok(triples.len())
}

pub fn gen_dataset(n: usize, seed: u64, out: &Path) -> Result<usize> {
    let data = Dataset::synthetic(n, seed);
    data.save(out)?;
    Ok(data.len())
}
