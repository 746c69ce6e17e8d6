//! Service configuration: TOML file, then environment overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use pentarag::embedding::{Embedder, HashEmbedder, RemoteEmbedder};
use pentarag::llm::{GenerationBackend, RemoteBackend, StubBackend, StubKnowledgeTable, STUB_LEARNED_CONFIDENCE};
use pentarag::metrics::LayerCostModel;
use pentarag::router::RouterConfig;
use pentarag::simulator::SimulationConfig;
use serde::{Deserialize, Serialize};

pub const ENV_LISTEN: &str = "PENTARAG_LISTEN";
pub const ENV_SNAPSHOT_DIR: &str = "PENTARAG_SNAPSHOT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderConfig {
    Builtin,
    Remote {
        endpoint: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Offline backend; `table` is an optional JSONL file of training triples
    /// it can recall.
    Stub {
        #[serde(default)]
        table: Option<PathBuf>,
    },
    Remote {
        endpoint: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_max_in_flight")]
        max_in_flight: usize,
    },
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_in_flight() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub router: RouterConfig,
    pub simulation: SimulationConfig,
    pub embedder: EmbedderConfig,
    pub backend: BackendConfig,
    pub snapshot_dir: Option<PathBuf>,
    pub cost_model: LayerCostModel,
    /// Concurrent `/query` requests allowed to route at once.
    pub max_in_flight: usize,
    /// Skip malformed JSONL lines with a warning instead of failing.
    pub lenient: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            router: RouterConfig {
                deterministic_settle: false,
                ..RouterConfig::default()
            },
            simulation: SimulationConfig::default(),
            embedder: EmbedderConfig::Builtin,
            backend: BackendConfig::Stub { table: None },
            snapshot_dir: None,
            cost_model: LayerCostModel::reference(),
            max_in_flight: 64,
            lenient: false,
        }
    }
}

impl ServiceConfig {
    /// Defaults, overlaid by the file if given, overlaid by the environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        Self::load_with_env(path, |k| std::env::var(k).ok())
    }

    pub fn load_with_env(path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Some(listen) = env(ENV_LISTEN) {
            config.listen = listen;
        }
        if let Some(dir) = env(ENV_SNAPSHOT_DIR) {
            config.snapshot_dir = Some(PathBuf::from(dir));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.router.validate()?;
        self.simulation.validate()?;
        self.cost_model.validate()?;
        anyhow::ensure!(self.max_in_flight > 0, "max_in_flight must be at least 1");
        Ok(())
    }

    pub fn build_embedder(&self) -> Arc<dyn Embedder> {
        match &self.embedder {
            EmbedderConfig::Builtin => Arc::new(HashEmbedder::default()),
            EmbedderConfig::Remote { endpoint, timeout_ms } => {
                Arc::new(RemoteEmbedder::new(endpoint.clone(), Duration::from_millis(*timeout_ms)))
            }
        }
    }

    pub fn build_backend(&self) -> Result<Arc<dyn GenerationBackend>> {
        Ok(match &self.backend {
            BackendConfig::Stub { table: None } => Arc::new(StubBackend::new(StubKnowledgeTable::new())),
            BackendConfig::Stub { table: Some(path) } => Arc::new(StubBackend::new(
                StubKnowledgeTable::from_triples_file(path, STUB_LEARNED_CONFIDENCE, self.lenient)
                    .with_context(|| format!("loading recall table {}", path.display()))?,
            )),
            BackendConfig::Remote {
                endpoint,
                timeout_ms,
                max_in_flight,
            } => Arc::new(RemoteBackend::new(
                endpoint.clone(),
                Duration::from_millis(*timeout_ms),
                *max_in_flight,
            )),
        })
    }
}
