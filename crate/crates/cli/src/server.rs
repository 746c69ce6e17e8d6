//! HTTP JSON API over a single process-wide router.

use std::future::Future;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pentarag::embedding::Embedder;
use pentarag::jsonl;
use pentarag::knowledge::{CorpusLine, MainKnowledgeBase};
use pentarag::metrics::{usage_from_counts, weighted_cost, weighted_qps, UsageRatios};
use pentarag::model::{AnswerRecord, Clock, LayerTag, MonotonicClock, SessionId};
use pentarag::router::{PentaRag, RouterStats};
use pentarag::Error;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::Semaphore;

use crate::commands::{load_kb, save_kb};
use crate::config::ServiceConfig;

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    config: ServiceConfig,
    router: PentaRag,
    embedder: Arc<dyn Embedder>,
    kb: Arc<MainKnowledgeBase>,
    permits: Semaphore,
}

impl AppState {
    /// Builds the router, restoring the knowledge base from the snapshot
    /// directory when one is configured.
    pub fn new(config: ServiceConfig) -> anyhow::Result<Self> {
        let embedder = config.build_embedder();
        let backend = config.build_backend()?;
        let kb = Arc::new(load_kb(config.snapshot_dir.as_deref(), embedder.dim())?);
        let router = PentaRag::builder(embedder.clone(), backend, kb.clone())
            .config(config.router.clone())
            .build()?;
        Ok(Self {
            inner: Arc::new(Inner {
                permits: Semaphore::new(config.max_in_flight),
                config,
                router,
                embedder,
                kb,
            }),
        })
    }

    pub fn router(&self) -> &PentaRag {
        &self.inner.router
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    detail: String,
}

impl ApiError {
    fn internal(e: impl std::fmt::Display) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            kind: "internal",
            detail: e.to_string(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, kind) = match &e {
            Error::EmptyQuery | Error::EmptyInput => (StatusCode::BAD_REQUEST, "empty_query"),
            Error::MalformedLine { .. } | Error::Json(_) | Error::InvalidVector(_) => {
                (StatusCode::BAD_REQUEST, "bad_request")
            }
            Error::AllLayersMissed { .. } => (StatusCode::SERVICE_UNAVAILABLE, "all_layers_missed"),
            Error::BackendUnavailable(_) => (StatusCode::BAD_GATEWAY, "backend_unavailable"),
            Error::EmbedderUnavailable(_) => (StatusCode::BAD_GATEWAY, "embedder_unavailable"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self {
            status,
            kind,
            detail: e.to_string(),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    detail: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.kind,
            detail: &self.detail,
        };
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct QueryRequest {
    pub text: String,
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    pub answer: AnswerRecord,
    pub layer: LayerTag,
    pub latency_seconds: f64,
}

async fn query(State(state): State<AppState>, Json(req): Json<QueryRequest>) -> Result<Json<QueryResponse>, ApiError> {
    let _permit = state.inner.permits.acquire().await.map_err(ApiError::internal)?;
    let session = SessionId::new(req.session_id.unwrap_or_else(|| "default".into()));
    let st = state.clone();
    let routed = tokio::task::spawn_blocking(move || st.inner.router.route_text(&req.text, &session))
        .await
        .map_err(ApiError::internal)??;
    // Keep memory bounded in long-running service mode.
    drop(state.inner.router.take_log());
    Ok(Json(QueryResponse {
        layer: routed.trace.serving_layer,
        latency_seconds: routed.trace.latency_seconds,
        answer: routed.answer,
    }))
}

#[derive(Debug, Default, Deserialize)]
pub struct IngestParams {
    #[serde(default)]
    pub lenient: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IngestResponse {
    pub count: usize,
    pub total: usize,
}

async fn ingest(
    State(state): State<AppState>,
    Query(params): Query<IngestParams>,
    body: String,
) -> Result<Json<IngestResponse>, ApiError> {
    let lenient = params.lenient.unwrap_or(state.inner.config.lenient);
    let st = state.clone();
    let (count, total) = tokio::task::spawn_blocking(move || -> Result<(usize, usize), ApiError> {
        let lines: Vec<CorpusLine> = jsonl::read_jsonl(body.as_bytes(), "request body", lenient)?;
        let inner = &st.inner;
        let count = inner.kb.ingest(inner.embedder.as_ref(), &lines, MonotonicClock.now_ns())?;
        if let Some(dir) = &inner.config.snapshot_dir {
            save_kb(&inner.kb, dir).map_err(ApiError::internal)?;
        }
        Ok((count, inner.kb.len()))
    })
    .await
    .map_err(ApiError::internal)??;
    Ok(Json(IngestResponse { count, total }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatsResponse {
    #[serde(flatten)]
    pub router: RouterStats,
    /// Absent until at least one query has been served.
    pub usage_ratios: Option<UsageRatios>,
    pub weighted_gpu_s_per_query: Option<f64>,
    pub weighted_qps: Option<f64>,
}

async fn stats(State(state): State<AppState>) -> Json<StatsResponse> {
    let router = state.inner.router.stats();
    let ratios = usage_from_counts(&router.layer_counts).ok();
    let model = &state.inner.config.cost_model;
    Json(StatsResponse {
        usage_ratios: ratios,
        weighted_gpu_s_per_query: ratios.and_then(|r| weighted_cost(model, &r).ok()),
        weighted_qps: ratios.and_then(|r| weighted_qps(model, &r).ok()),
        router,
    })
}

async fn reset(State(state): State<AppState>) -> StatusCode {
    state.inner.router.reset_session();
    StatusCode::NO_CONTENT
}

async fn healthz() -> &'static str {
    "ok"
}

pub fn app(state: AppState) -> Router {
    Router::new()
        .route("/query", post(query))
        .route("/ingest", post(ingest))
        .route("/stats", get(stats))
        .route("/session/reset", post(reset))
        .route("/healthz", get(healthz))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, state: AppState, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app(state)).with_graceful_shutdown(shutdown).await
}
