//! JSON-over-HTTP front end: character registration, matching and prompt
//! inspection, multi-turn chat sessions and evaluation runs.
//!
//! Every response body is a JSON object carrying `"schema_version": 1`.
//! Engine work runs on tokio's blocking pool.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use chrono::{DateTime, Utc};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{Any, CorsLayer};

use pdp_core::candidate_index::CandidateIndex;
use pdp_core::style_eval::{run_eval, EvalConfig, EvalMethod, EvalReport, StyleClassifier};
use pdp_core::transcript::{append_exchange, ExchangeRecord};
use pdp_core::{
    CharacterCard, DecodingConfig, DialogHistory, Engine, EngineConfig, Error, MatchStrategy,
    MatchedPair, PromptFormat, RegisteredCharacter, StrategyKind,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Service-level knobs that sit outside the engine.
#[derive(Debug, Clone, Default)]
pub struct ServiceSettings {
    pub default_strategy: StrategyKind,
    pub cors_origin: Option<String>,
    pub session_log_dir: Option<PathBuf>,
    pub reports_dir: Option<PathBuf>,
}

impl ServiceSettings {
    pub fn from_config(config: &EngineConfig) -> Self {
        ServiceSettings {
            default_strategy: config.default_strategy,
            cors_origin: config.cors_origin.clone(),
            session_log_dir: config.session_log_dir.clone(),
            reports_dir: config.reports_dir.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ChatSession {
    pub session_id: String,
    pub character_id: String,
    pub strategy: MatchStrategy,
    pub format: PromptFormat,
    pub history: DialogHistory,
    pub created_at: DateTime<Utc>,
    pub decoding: DecodingConfig,
}

struct SessionSlot {
    busy: AtomicBool,
    session: Mutex<ChatSession>,
}

/// Clears the in-flight flag however the message handler exits.
struct BusyGuard<'a>(&'a AtomicBool);

impl Drop for BusyGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

pub struct AppState {
    engine: Engine,
    settings: ServiceSettings,
    characters: RwLock<HashMap<String, Arc<RegisteredCharacter>>>,
    sessions: RwLock<HashMap<String, Arc<SessionSlot>>>,
    reports: Mutex<HashMap<String, Arc<EvalReport>>>,
}

impl AppState {
    pub fn new(engine: Engine, settings: ServiceSettings) -> Self {
        AppState {
            engine,
            settings,
            characters: RwLock::default(),
            sessions: RwLock::default(),
            reports: Mutex::default(),
        }
    }

    /// Builds the backends and loads the index named in `config`.
    pub fn from_config(config: &EngineConfig) -> pdp_core::Result<Self> {
        let embedder = config.embedding_backend.build()?;
        let lm = config.lm_backend.build()?;
        let path = config
            .index_path
            .as_ref()
            .ok_or_else(|| Error::Config("index_path is required to serve".into()))?;
        let dim = config.embedding_backend.dim;
        let loaded = CandidateIndex::load(path, None)?;
        if dim.is_some_and(|d| d != loaded.dim()) {
            return Err(Error::Config(format!(
                "configured embedding dim {} does not match index dim {}",
                dim.unwrap_or_default(),
                loaded.dim()
            )));
        }
        let mut engine = Engine::new(Arc::new(loaded), embedder, lm)?;
        engine.decoding = config.default_decoding.clone();
        engine.max_prompt_chars = config.max_prompt_chars;
        Ok(AppState::new(engine, ServiceSettings::from_config(config)))
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn character(&self, id: &str) -> Option<Arc<RegisteredCharacter>> {
        self.characters.read().unwrap().get(id).cloned()
    }

    /// Snapshot of a session, if it exists.
    pub fn session(&self, id: &str) -> Option<ChatSession> {
        let slot = self.sessions.read().unwrap().get(id).cloned()?;
        let session = slot.session.lock().unwrap().clone();
        Some(session)
    }

    fn character_or_404(&self, id: &str) -> Result<Arc<RegisteredCharacter>, ApiError> {
        self.character(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown character {id:?}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = if e.is_backend_failure() {
            StatusCode::BAD_GATEWAY
        } else {
            match e {
                Error::StaleIndex { .. } => StatusCode::INTERNAL_SERVER_ERROR,
                _ => StatusCode::BAD_REQUEST,
            }
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"schema_version": SCHEMA_VERSION, "error": self.message});
        (self.status, axum::Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn reply(status: StatusCode, body: Value) -> ApiResult {
    let mut body = body;
    if let Value::Object(map) = &mut body {
        map.insert("schema_version".into(), SCHEMA_VERSION.into());
    }
    Ok((status, axum::Json(body)).into_response())
}

fn ok(body: Value) -> ApiResult {
    reply(StatusCode::OK, body)
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn parse_strategy(name: Option<&str>, seed: Option<u64>, default: StrategyKind) -> Result<MatchStrategy, ApiError> {
    let kind = match name {
        Some(s) => s.parse::<StrategyKind>().map_err(|e| ApiError::bad_request(e.to_string()))?,
        None => default,
    };
    Ok(MatchStrategy { kind, seed })
}

fn pair_rows(pairs: &[MatchedPair]) -> Value {
    serde_json::to_value(pairs).expect("pairs serialize")
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = match state.settings.cors_origin.as_deref().map(HeaderValue::from_str) {
        Some(Ok(origin)) => CorsLayer::new().allow_origin(origin),
        Some(Err(_)) => {
            warn!("ignoring invalid cors_origin; allowing any origin");
            CorsLayer::new().allow_origin(Any)
        }
        None => CorsLayer::new().allow_origin(Any),
    }
    .allow_methods(Any)
    .allow_headers(Any);

    Router::new()
        .route("/health", get(health))
        .route("/characters", post(create_character).get(list_characters))
        .route("/match", post(match_pairs))
        .route("/prompt", post(preview_prompt))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/eval/run", post(eval_run))
        .route("/eval/{run_id}", get(get_report))
        .layer(cors)
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn health(State(state): State<Arc<AppState>>) -> ApiResult {
    let index = &state.engine.index;
    ok(json!({
        "status": "ok",
        "candidates": index.len(),
        "dim": index.dim(),
        "backend_fingerprint": index.fingerprint(),
    }))
}

async fn create_character(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let card: CharacterCard = parse_body(&body)?;
    let card = card.normalized().map_err(|e| ApiError::bad_request(e.to_string()))?;
    let id = card.character_id.clone();
    if state.character(&id).is_some() {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("character {id:?} already exists")));
    }
    let st = state.clone();
    let registered = blocking(move || {
        st.engine.register(card).map_err(|e| {
            if e.is_backend_failure() {
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string())
            } else {
                ApiError::from(e)
            }
        })
    })
    .await?;
    {
        let mut registry = state.characters.write().unwrap();
        if registry.contains_key(&id) {
            return Err(ApiError::new(StatusCode::CONFLICT, format!("character {id:?} already exists")));
        }
        registry.insert(id.clone(), Arc::new(registered));
    }
    info!("registered character {id}");
    reply(StatusCode::CREATED, json!({"character_id": id}))
}

async fn list_characters(State(state): State<Arc<AppState>>) -> ApiResult {
    let registry = state.characters.read().unwrap();
    let mut rows: Vec<Value> = registry
        .values()
        .map(|ch| {
            json!({
                "character_id": ch.id(),
                "name": ch.card.name,
                "show": ch.card.show,
                "k": ch.card.k(),
                "has_gold_contexts": ch.card.gold_contexts.is_some(),
            })
        })
        .collect();
    rows.sort_by(|a, b| a["character_id"].as_str().cmp(&b["character_id"].as_str()));
    ok(json!({"characters": rows}))
}

#[derive(Deserialize)]
struct MatchRequest {
    character_id: String,
    context: String,
    #[serde(default)]
    strategy: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    format: Option<String>,
}

async fn match_pairs(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: MatchRequest = parse_body(&body)?;
    let strategy = parse_strategy(req.strategy.as_deref(), req.seed, state.settings.default_strategy)?;
    let ch = state.character_or_404(&req.character_id)?;
    let st = state.clone();
    let pairs = blocking(move || Ok(st.engine.pseudo_dialog(&ch, &req.context, strategy)?)).await?;
    ok(json!({"strategy": strategy, "pairs": pair_rows(&pairs)}))
}

async fn preview_prompt(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: MatchRequest = parse_body(&body)?;
    let strategy = parse_strategy(req.strategy.as_deref(), req.seed, state.settings.default_strategy)?;
    let format = match req.format.as_deref() {
        Some(f) => f.parse::<PromptFormat>().map_err(|e| ApiError::bad_request(e.to_string()))?,
        None => PromptFormat::Pdp,
    };
    let ch = state.character_or_404(&req.character_id)?;
    let st = state.clone();
    let prepared = blocking(move || {
        Ok(st
            .engine
            .prepare(&ch, &req.context, &DialogHistory::new(), strategy, format)?)
    })
    .await?;
    ok(json!({
        "prompt_text": prepared.prompt.text,
        "format": format,
        "prompt_chars": prepared.prompt.char_len(),
        "stop_sequences": prepared.prompt.stop_sequences,
        "pairs": pair_rows(&prepared.pairs),
    }))
}

#[derive(Deserialize)]
struct SessionRequest {
    character_id: String,
    #[serde(default)]
    strategy: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    format: Option<String>,
    #[serde(default)]
    decoding: Option<DecodingConfig>,
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: SessionRequest = parse_body(&body)?;
    let strategy = parse_strategy(req.strategy.as_deref(), req.seed, state.settings.default_strategy)?;
    let format = match req.format.as_deref() {
        Some(f) => f.parse::<PromptFormat>().map_err(|e| ApiError::bad_request(e.to_string()))?,
        None => PromptFormat::Pdp,
    };
    let decoding = req.decoding.unwrap_or_else(|| state.engine.decoding.clone());
    decoding.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    let ch = state.character_or_404(&req.character_id)?;
    if strategy.kind == StrategyKind::Gold && ch.card.gold_contexts.is_none() {
        return Err(ApiError::bad_request(format!(
            "character {:?} has no gold contexts",
            ch.id()
        )));
    }
    let session = ChatSession {
        session_id: uuid::Uuid::new_v4().to_string(),
        character_id: ch.id().to_string(),
        strategy,
        format,
        history: DialogHistory::new(),
        created_at: Utc::now(),
        decoding,
    };
    let id = session.session_id.clone();
    let slot = Arc::new(SessionSlot {
        busy: AtomicBool::new(false),
        session: Mutex::new(session),
    });
    state.sessions.write().unwrap().insert(id.clone(), slot);
    reply(StatusCode::CREATED, json!({"session_id": id}))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let session = state
        .session(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id:?}")))?;
    let mut body = serde_json::to_value(&session).expect("session serializes");
    body["exchanges"] = (session.history.len() / 2).into();
    ok(body)
}

#[derive(Deserialize)]
struct MessageRequest {
    text: String,
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult {
    let slot = state
        .sessions
        .read()
        .unwrap()
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id:?}")))?;
    let req: MessageRequest = parse_body(&body)?;
    if req.text.trim().is_empty() {
        return Err(ApiError::bad_request("message text is empty"));
    }
    if slot
        .busy
        .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
        .is_err()
    {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "a message is already in flight for this session",
        ));
    }
    let st = state.clone();
    let log_dir = state.settings.session_log_dir.clone();
    blocking(move || {
        let _guard = BusyGuard(&slot.busy);
        let session = slot.session.lock().unwrap().clone();
        let ch = st.character_or_404(&session.character_id)?;
        let reply = st.engine.respond(
            &ch,
            &req.text,
            &session.history,
            session.strategy,
            session.format,
            Some(&session.decoding),
        )?;
        let turn = session.history.len() / 2;
        if let Some(dir) = &log_dir {
            let record = ExchangeRecord::now(
                &session.session_id,
                turn,
                &req.text,
                &reply.response.text,
                reply.response.prompt_chars,
            );
            let path = dir.join(format!("{}.jsonl", session.session_id));
            let written = fs::create_dir_all(dir)
                .map_err(|e| e.to_string())
                .and_then(|_| append_exchange(&path, &record).map_err(|e| e.to_string()));
            if let Err(e) = written {
                warn!("session log write failed: {e}");
            }
        }
        slot.session
            .lock()
            .unwrap()
            .history
            .push_exchange(req.text.clone(), reply.response.text.clone());
        let body = json!({
            "reply": reply.response.text,
            "matched_pairs": pair_rows(&reply.pairs),
            "prompt_chars": reply.response.prompt_chars,
            "prompt_text": reply.prompt.text,
            "turn": turn,
        });
        Ok(body)
    })
    .await
    .and_then(ok)
}

#[derive(Deserialize)]
struct EvalRequest {
    #[serde(default)]
    contexts_file: Option<PathBuf>,
    #[serde(default)]
    character_ids: Vec<String>,
    #[serde(default)]
    strategies: Vec<String>,
    #[serde(default)]
    min_context_length: Option<usize>,
    #[serde(default)]
    ngram_n: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
}

async fn eval_run(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: EvalRequest = parse_body(&body)?;
    let contexts_file = req
        .contexts_file
        .ok_or_else(|| ApiError::bad_request("contexts_file is required"))?;
    if req.character_ids.is_empty() {
        return Err(ApiError::bad_request("character_ids must not be empty"));
    }
    if req.strategies.is_empty() {
        return Err(ApiError::bad_request("strategies must not be empty"));
    }
    let methods = req
        .strategies
        .iter()
        .map(|s| s.parse::<EvalMethod>().map_err(|e| ApiError::bad_request(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let characters: Vec<RegisteredCharacter> = req
        .character_ids
        .iter()
        .map(|id| state.character_or_404(id).map(|c| (*c).clone()))
        .collect::<Result<_, _>>()?;
    let mut config = EvalConfig::default();
    if let Some(m) = req.min_context_length {
        config.min_context_length = m;
    }
    if let Some(n) = req.ngram_n {
        config.ngram_n = n;
    }
    if let Some(seed) = req.seed {
        config.seed = seed;
    }

    let st = state.clone();
    let report = blocking(move || {
        let registry: Vec<Arc<RegisteredCharacter>> = st.characters.read().unwrap().values().cloned().collect();
        let classifier = if registry.len() >= 2 {
            Some(StyleClassifier::from_cards(registry.iter().map(|c| &c.card))?)
        } else {
            None
        };
        Ok(run_eval(
            &st.engine,
            &contexts_file,
            &characters,
            &methods,
            classifier.as_ref(),
            &config,
        )?)
    })
    .await?;

    let run_id = uuid::Uuid::new_v4().to_string();
    let mut report = report;
    report.run_id = Some(run_id.clone());
    if let Some(dir) = &state.settings.reports_dir {
        let path = dir.join(format!("{run_id}.json"));
        if let Err(e) = fs::create_dir_all(dir).and_then(|_| fs::write(&path, report.to_json())) {
            warn!("could not persist report {}: {e}", path.display());
        }
    }
    let body = serde_json::to_value(&report).expect("report serializes");
    state.reports.lock().unwrap().insert(run_id, Arc::new(report));
    ok(body)
}

async fn get_report(State(state): State<Arc<AppState>>, Path(run_id): Path<String>) -> ApiResult {
    let report = state
        .reports
        .lock()
        .unwrap()
        .get(&run_id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown run {run_id:?}")))?;
    ok(serde_json::to_value(&*report).expect("report serializes"))
}
