use std::net::SocketAddr;
use std::sync::mpsc;
use std::thread;

use pentarag_cli::server::{serve, AppState};
use pentarag_cli::ServiceConfig;
use serde_json::{json, Value};
use tokio::sync::oneshot;

struct Server {
    base: String,
    agent: ureq::Agent,
    stop: Option<oneshot::Sender<()>>,
    handle: Option<thread::JoinHandle<()>>,
}

impl Server {
    fn start(config: ServiceConfig) -> Self {
        let state = AppState::new(config).unwrap();
        let (addr_tx, addr_rx) = mpsc::channel::<SocketAddr>();
        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        let handle = thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                serve(listener, state, async {
                    let _ = stop_rx.await;
                })
                .await
                .unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self {
            base: format!("http://{addr}"),
            agent,
            stop: Some(stop_tx),
            handle: Some(handle),
        }
    }

    fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let mut resp = self.agent.post(format!("{}{path}", self.base)).send_json(body).unwrap();
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap();
        (status, serde_json::from_str(&text).unwrap_or(Value::Null))
    }

    fn post_text(&self, path: &str, body: &str) -> (u16, Value) {
        let mut resp = self.agent.post(format!("{}{path}", self.base)).send(body).unwrap();
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_json().unwrap_or(Value::Null))
    }

    fn get(&self, path: &str) -> (u16, String) {
        let mut resp = self.agent.get(format!("{}{path}", self.base)).call().unwrap();
        (resp.status().as_u16(), resp.body_mut().read_to_string().unwrap())
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

const CORPUS: &str = r#"{"id":"hamlet","text":"Hamlet is a tragedy written by William Shakespeare.","source":"t","answer":"William Shakespeare"}
{"id":"danube","text":"The Danube flows through Vienna and Budapest.","source":"t","answer":"the Danube"}

{"id":"everest","text":"Mount Everest is the highest mountain on Earth.","source":"t","answer":"Mount Everest"}
"#;

#[test]
fn query_cascade_over_http() {
    let snap = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        snapshot_dir: Some(snap.path().to_path_buf()),
        ..Default::default()
    };
    let server = Server::start(config);

    assert_eq!(server.get("/healthz"), (200, "ok".into()));

    let (status, body) = server.post_text("/ingest", CORPUS);
    assert_eq!(status, 200);
    assert_eq!(body["count"], 3);
    assert_eq!(body["total"], 3);
    assert!(snap.path().join("main_kb.idx").exists());

    let q = json!({"text": "Who wrote the tragedy Hamlet?", "session_id": "u1"});
    let (status, first) = server.post("/query", q.clone());
    assert_eq!(status, 200);
    assert_eq!(first["layer"], "naive_rag");
    assert_eq!(first["answer"]["text"], "William Shakespeare");
    assert_eq!(first["answer"]["supporting_passage_ids"][0], "hamlet");

    let (_, second) = server.post("/query", q.clone());
    assert_eq!(second["layer"], "fixed_kv");
    assert_eq!(second["answer"]["text"], "William Shakespeare");

    let (_, near) = server.post("/query", json!({"text": "who wrote the tragedy hamlet"}));
    assert_eq!(near["layer"], "semantic_cache");

    let (status, stats) = server.get("/stats");
    assert_eq!(status, 200);
    let stats: Value = serde_json::from_str(&stats).unwrap();
    let counts = stats["layer_counts"].as_object().unwrap();
    let served: u64 = counts.values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(served, 3);
    assert_eq!(stats["total_queries"], 3);
    assert_eq!(counts["fixed_kv"], 1);
    assert_eq!(stats["knowledge_base_size"], 3);
    let ratio_sum: f64 = stats["usage_ratios"].as_object().unwrap().values().map(|v| v.as_f64().unwrap()).sum();
    assert!((ratio_sum - 1.0).abs() < 1e-9);
    assert!(stats["weighted_gpu_s_per_query"].as_f64().unwrap() > 0.0);

    let resp = server.agent.post(format!("{}/session/reset", server.base)).send_empty().unwrap();
    assert_eq!(resp.status().as_u16(), 204);
    let (_, after) = server.post("/query", q);
    assert_eq!(after["layer"], "naive_rag");
}

#[test]
fn errors_are_structured() {
    let server = Server::start(ServiceConfig::default());
    let (status, body) = server.post("/query", json!({"text": "   "}));
    assert_eq!(status, 400);
    assert_eq!(body["error"], "empty_query");
    assert!(body["detail"].is_string());

    // Nothing ingested and nothing recallable: every layer misses.
    let (status, body) = server.post("/query", json!({"text": "anything at all"}));
    assert_eq!(status, 503);
    assert_eq!(body["error"], "all_layers_missed");

    let (status, body) = server.post_text("/ingest", "{\"id\":\"a\",\"text\":\"x\",\"source\":\"s\"}\nnot json\n");
    assert_eq!(status, 400);
    assert_eq!(body["error"], "bad_request");
    assert!(body["detail"].as_str().unwrap().contains("request body:2:"));

    let (status, body) = server.post_text(
        "/ingest?lenient=true",
        "{\"id\":\"a\",\"text\":\"x\",\"source\":\"s\"}\nnot json\n",
    );
    assert_eq!(status, 200);
    assert_eq!(body["count"], 1);
}

#[test]
fn snapshot_survives_restart() {
    let snap = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        snapshot_dir: Some(snap.path().to_path_buf()),
        ..Default::default()
    };
    {
        let server = Server::start(config.clone());
        assert_eq!(server.post_text("/ingest", CORPUS).1["count"], 3);
    }
    let server = Server::start(config);
    let (_, stats) = server.get("/stats");
    let stats: Value = serde_json::from_str(&stats).unwrap();
    assert_eq!(stats["knowledge_base_size"], 3);
    assert!(stats["usage_ratios"].is_null());
    let (_, out) = server.post("/query", json!({"text": "Which river flows through Vienna?"}));
    assert_eq!(out["answer"]["text"], "the Danube");
}
