#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;

use pfclab_service::clock::ClockMode;
use pfclab_service::{serve, Lab, LabConfig};
use serde_json::{json, Value};
use tempfile::TempDir;
use tokio::sync::oneshot;

pub const ADMIN_KEY: &str = "test-admin-key";

pub struct TestServer {
    pub addr: SocketAddr,
    pub lab: Arc<Lab>,
    pub dir: TempDir,
    pub http: reqwest::Client,
    stop: Option<oneshot::Sender<()>>,
    task: Option<tokio::task::JoinHandle<std::io::Result<()>>>,
}

pub fn base_config(dir: &std::path::Path) -> LabConfig {
    let mut cfg = LabConfig { bind: "127.0.0.1:0".into(), admin_key: Some(ADMIN_KEY.into()), ..LabConfig::default() };
    cfg.clock.mode = ClockMode::Simulated;
    cfg.session.slots_file = None;
    cfg.session.log_file = dir.join("session-log.jsonl");
    cfg
}

pub async fn start(tweak: impl FnOnce(&mut LabConfig)) -> TestServer {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config(dir.path());
    tweak(&mut cfg);
    start_with(cfg, dir).await
}

pub async fn start_with(cfg: LabConfig, dir: TempDir) -> TestServer {
    let lab = Lab::new(cfg).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (stop, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(serve(Arc::clone(&lab), listener, async move {
        let _ = rx.await;
    }));
    TestServer { addr, lab, dir, http: reqwest::Client::new(), stop: Some(stop), task: Some(task) }
}

impl TestServer {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}/api/v1{}", self.addr, path)
    }

    pub fn ws_url(&self, query: &str) -> String {
        format!("ws://{}/api/v1/scope{}", self.addr, query)
    }

    pub fn log_path(&self) -> std::path::PathBuf {
        self.lab.config().session.log_file.clone()
    }

    pub async fn get(&self, path: &str, token: Option<&str>) -> (u16, Value) {
        let mut req = self.http.get(self.url(path));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        decode(req.send().await.unwrap()).await
    }

    pub async fn post(&self, path: &str, token: Option<&str>, body: Value) -> (u16, Value) {
        let mut req = self.http.post(self.url(path)).json(&body);
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        decode(req.send().await.unwrap()).await
    }

    pub async fn delete(&self, path: &str, token: Option<&str>) -> (u16, Value) {
        let mut req = self.http.delete(self.url(path));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        decode(req.send().await.unwrap()).await
    }

    pub async fn admin_post(&self, path: &str, body: Value) -> (u16, Value) {
        let req = self.http.post(self.url(path)).header("X-Admin-Key", ADMIN_KEY).json(&body);
        decode(req.send().await.unwrap()).await
    }

    pub async fn advance(&self, seconds: f64) -> Value {
        let (status, body) = self.admin_post("/admin/clock/advance", json!({ "seconds": seconds })).await;
        assert_eq!(status, 200, "{body}");
        body
    }

    /// Creates a slot covering the current simulated time and returns its
    /// claim code and id.
    pub async fn open_slot(&self, student: &str, length_s: f64) -> (String, String) {
        let now = self.lab.now();
        let (status, slot) = self
            .admin_post("/admin/slots", json!({ "student_id": student, "start": now, "end": now + length_s }))
            .await;
        assert_eq!(status, 201, "{slot}");
        (slot["claim_code"].as_str().unwrap().to_string(), slot["slot_id"].as_str().unwrap().to_string())
    }

    pub async fn claim(&self, code: &str) -> String {
        let (status, tok) = self.post("/session/claim", None, json!({ "claim_code": code })).await;
        assert_eq!(status, 200, "{tok}");
        tok["token"].as_str().unwrap().to_string()
    }

    /// Shuts the server down and hands back its working directory.
    pub async fn stop(mut self) -> TempDir {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.task.take() {
            t.await.unwrap().unwrap();
        }
        self.dir
    }
}

pub async fn decode(resp: reqwest::Response) -> (u16, Value) {
    let status = resp.status().as_u16();
    let text = resp.text().await.unwrap();
    let body = serde_json::from_str(&text).unwrap_or(Value::String(text));
    (status, body)
}

/// Sorted key list of a JSON object, used to pin response shapes.
pub fn keys(v: &Value) -> Vec<String> {
    let mut k: Vec<String> = v.as_object().expect("object").keys().cloned().collect();
    k.sort();
    k
}

pub fn golden(name: &str) -> Vec<String> {
    let path = format!("{}/tests/golden/{name}.json", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
    let v: Value = serde_json::from_str(&text).unwrap();
    keys(&v)
}
