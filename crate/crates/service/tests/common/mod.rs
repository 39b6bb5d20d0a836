#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use pdp_core::{
    build_index, CompletionBackend, CompletionRequest, EchoBackend, Engine, EmbeddingBackend,
    Error, MockHashBackend, PrecomputedBackend, Result,
};
use pdp_service::{router, AppState, ServiceSettings};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

pub fn fixture_text(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap()
}

pub fn engine_with(
    embedder: Arc<dyn EmbeddingBackend>,
    pool: &str,
    lm: Arc<dyn CompletionBackend>,
) -> Engine {
    let index = build_index(&fixture(pool), embedder.as_ref()).unwrap();
    Engine::new(Arc::new(index), embedder, lm).unwrap()
}

pub fn mock_engine(lm: Arc<dyn CompletionBackend>) -> Engine {
    engine_with(Arc::new(MockHashBackend::new(16).unwrap()), "pool.txt", lm)
}

pub fn marge_engine() -> Engine {
    let embedder = Arc::new(PrecomputedBackend::load(&fixture("marge_vectors.json")).unwrap());
    engine_with(embedder, "marge_pool.txt", Arc::new(EchoBackend::last_character_line()))
}

pub fn two_candidate_engine() -> Engine {
    let embedder = Arc::new(PrecomputedBackend::load(&fixture("two_candidate_vectors.json")).unwrap());
    engine_with(embedder, "two_candidate_pool.txt", Arc::new(EchoBackend::last_character_line()))
}

pub fn app(engine: Engine) -> (Router, Arc<AppState>) {
    app_with(engine, ServiceSettings::default())
}

pub fn app_with(engine: Engine, settings: ServiceSettings) -> (Router, Arc<AppState>) {
    let state = Arc::new(AppState::new(engine, settings));
    (router(state.clone()), state)
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    call_raw(app, method, uri, body.map(|b| b.to_string())).await
}

pub async fn call_raw(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let json = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    assert_eq!(json["schema_version"], 1, "missing schema_version on {uri}: {json}");
    (status, json)
}

/// Fails every completion the way an HTTP 500 from the LM server does.
pub struct FailingLm;

impl CompletionBackend for FailingLm {
    fn complete_raw(&self, _: &CompletionRequest) -> Result<String> {
        Err(Error::Backend {
            status: Some(500),
            message: "internal server error".into(),
        })
    }
}

/// Signals when a completion starts and holds it until released.
pub struct GatedLm {
    entered: Mutex<Sender<()>>,
    release: Mutex<Receiver<()>>,
}

pub struct Gate {
    pub entered: Receiver<()>,
    pub release: Sender<()>,
}

impl GatedLm {
    pub fn new() -> (Self, Gate) {
        let (entered_tx, entered_rx) = channel();
        let (release_tx, release_rx) = channel();
        (
            GatedLm {
                entered: Mutex::new(entered_tx),
                release: Mutex::new(release_rx),
            },
            Gate {
                entered: entered_rx,
                release: release_tx,
            },
        )
    }
}

impl CompletionBackend for GatedLm {
    fn complete_raw(&self, _: &CompletionRequest) -> Result<String> {
        self.entered.lock().unwrap().send(()).ok();
        self.release.lock().unwrap().recv().ok();
        Ok(" Quack!\nUser:".into())
    }
}

/// Mock encoder that can be switched off after the index is built.
pub struct SwitchableEmbedder {
    inner: MockHashBackend,
    pub down: std::sync::atomic::AtomicBool,
}

impl SwitchableEmbedder {
    pub fn new(dim: usize) -> Self {
        SwitchableEmbedder {
            inner: MockHashBackend::new(dim).unwrap(),
            down: Default::default(),
        }
    }
}

impl EmbeddingBackend for SwitchableEmbedder {
    fn embed_batch(&self, texts: &[String], side: pdp_core::Side) -> Result<Vec<pdp_core::Embedding>> {
        if self.down.load(std::sync::atomic::Ordering::SeqCst) {
            return Err(Error::Transport {
                endpoint: "http://embedder".into(),
                message: "connection refused".into(),
            });
        }
        self.inner.embed_batch(texts, side)
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn dim(&self) -> Option<usize> {
        EmbeddingBackend::dim(&self.inner)
    }
}
