use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pentarag_cli::commands;
use pentarag_cli::server::{serve, AppState};
use pentarag_cli::ServiceConfig;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "pentarag", version, about = "Five-layer query-routing cascade: service and tools")]
struct Cli {
    /// TOML configuration file. PENTARAG_LISTEN and PENTARAG_SNAPSHOT_DIR override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Skip malformed JSONL lines with a warning instead of failing.
    #[arg(long, global = true)]
    lenient: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed a corpus JSONL file into the knowledge-base snapshot.
    Ingest {
        corpus: PathBuf,
        /// Defaults to the configured snapshot directory.
        #[arg(long)]
        snapshot_dir: Option<PathBuf>,
    },
    /// Run the multi-session workload simulation.
    Simulate {
        /// QA dataset JSONL ({"question","answer","context"}); synthetic when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        synthetic_size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        sessions: Option<usize>,
        #[arg(long)]
        queries_per_session: Option<usize>,
    },
    /// Write warm-up, latency, usage and cost reports from session logs.
    Report {
        logs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export (question, context, answer) triples from session logs.
    ExportTriples {
        /// A session log file or a directory of them.
        logs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic QA dataset.
    GenDataset {
        #[arg(long, default_value_t = 2000)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Start the HTTP service.
    Serve,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let mut config = ServiceConfig::load(cli.config.as_deref())?;
    config.lenient |= cli.lenient;

    match cli.command {
        Command::Ingest { corpus, snapshot_dir } => {
            let dir = snapshot_dir
                .or_else(|| config.snapshot_dir.clone())
                .context("no snapshot directory: pass --snapshot-dir or set snapshot_dir")?;
            let r = commands::ingest(&config, &corpus, &dir)?;
            println!("{}", serde_json::to_string(&r)?);
        }
        Command::Simulate {
            dataset,
            synthetic_size,
            out,
            seed,
            sessions,
            queries_per_session,
        } => {
            let sim = &mut config.simulation;
            sim.seed = seed.unwrap_or(sim.seed);
            sim.n_sessions = sessions.unwrap_or(sim.n_sessions);
            sim.queries_per_session = queries_per_session.unwrap_or(sim.queries_per_session);
            config.validate()?;
            let paths = commands::simulate(&config, dataset.as_deref(), synthetic_size, &out)?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::Report { logs, out } => {
            let summary = commands::report(&logs, &out, &config.cost_model, config.lenient)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::ExportTriples { logs, out } => {
            let n = commands::export_triples(&logs, &out, config.lenient)?;
            println!("{n} triples written to {}", out.display());
        }
        Command::GenDataset { size, seed, out } => {
            let n = commands::gen_dataset(size, seed, &out)?;
            println!("{n} rows written to {}", out.display());
        }
        Command::Serve => {
            let state = AppState::new(config.clone())?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&config.listen)
                    .await
                    .with_context(|| format!("binding {}", config.listen))?;
                let shutdown = async {
                    let _ = tokio::signal::ctrl_c().await;
                };
                serve(listener, state, shutdown).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}
