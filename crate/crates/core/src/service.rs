//! HTTP chat service.
//!
//! | Method | Path                        | Success |
//! |--------|-----------------------------|---------|
//! | POST   | `/api/session`              | 200 `{session_id, greeting, variant}` |
//! | POST   | `/api/chat`                 | 200 `{text, kind, source_url?, confidence?, entry_id?, feedback_prompt?, seq, corpus_hash}` |
//! | POST   | `/api/feedback`             | 204 |
//! | GET    | `/api/transcript/{id}`      | 200 `{session_id, turns}` |
//! | GET    | `/api/admin/metrics`        | 200 health metrics |
//! | POST   | `/api/admin/corpus/reload`  | 202 `{corpus_hash, previous_corpus_hash}` |
//!
//! Admin routes need `Authorization: Bearer <admin_token>`. RCT assignment
//! keys on the `X-User-Token` header. Errors are `{"error": "..."}`.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::config::{ConfigError, ServiceConfig};
use crate::corpus::{load_corpus, Corpus, CorpusError};
use crate::dialogue::{handle_turn, DialogueError, FeedbackError, Session, SessionFactory, TurnContext, UtteranceLibrary, Variant};
use crate::evalharness::{assign, compute_metrics, FeedbackRecord, HealthMetrics, SessionInfo, DEFAULT_CONFUSION_TOP_K};
use crate::nlu::{train, IntentModel, NluError};
use crate::paraphrase::{paraphrase_corpus, ParaphraseError, RuleParaphraser};
use crate::safety::{
    parse_records, replay_bytes, AuditError, AuditLog, AuditPayload, DecisionSummary, ResponseKind, SafetyPolicy,
    TranscriptTurn,
};

pub const USER_TOKEN_HEADER: &str = "x-user-token";
pub const SYSTEM_SESSION: &str = "_system";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] NluError),
    #[error(transparent)]
    Paraphrase(#[from] ParaphraseError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
    #[error("model was trained on corpus {model} but corpus file hashes to {corpus}")]
    ModelCorpusMismatch { model: String, corpus: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// The corpus and the model trained on it, swapped as one value.
#[derive(Debug)]
pub struct Engine {
    pub corpus: Corpus,
    pub model: IntentModel,
}

impl Engine {
    pub fn corpus_hash(&self) -> &str {
        self.model.corpus_hash()
    }

    /// Loads a corpus and its saved model; the model must match the corpus.
    pub fn load(corpus_path: &Path, model_path: &Path, state_label: &str) -> Result<Self, ServiceError> {
        let corpus = load_corpus(corpus_path, state_label)?;
        let model = IntentModel::load(model_path)?;
        let digest = corpus.digest();
        if model.corpus_hash() != digest {
            return Err(ServiceError::ModelCorpusMismatch { model: model.corpus_hash().to_string(), corpus: digest });
        }
        Ok(Self { corpus, model })
    }

    pub fn train(corpus: Corpus, k: usize) -> Result<Self, ServiceError> {
        let sets = paraphrase_corpus(&RuleParaphraser::builtin(), &corpus, k)?;
        let model = train(&corpus, &sets)?;
        Ok(Self { corpus, model })
    }
}

struct FeedbackStore {
    file: File,
    records: Vec<FeedbackRecord>,
}

impl FeedbackStore {
    fn open(path: &Path) -> Result<Self, ServiceError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let records = match std::fs::read_to_string(path) {
            Ok(text) => text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file, records })
    }

    fn append(&mut self, record: FeedbackRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_string(&record).expect("feedback serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        self.records.push(record);
        Ok(())
    }
}

/// Shared service state.
pub struct AppState {
    config: ServiceConfig,
    library: UtteranceLibrary,
    policy: SafetyPolicy,
    engine: RwLock<Option<Arc<Engine>>>,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
    registry: Mutex<Vec<SessionInfo>>,
    audit: Mutex<AuditLog>,
    feedback: Mutex<FeedbackStore>,
    factory: SessionFactory,
    reloading: AtomicBool,
}

/// Held while a reload runs; a second reload is refused with 423.
pub struct ReloadGuard<'a>(&'a AtomicBool);

impl Drop for ReloadGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

impl AppState {
    /// Opens logs and the utterance library. No model is loaded yet.
    pub fn new(config: ServiceConfig) -> Result<Self, ServiceError> {
        let library = match &config.library_path {
            Some(p) => UtteranceLibrary::load(p)?,
            None => UtteranceLibrary::builtin(),
        };
        let audit = AuditLog::open(&config.audit_log_path)?;
        let feedback = FeedbackStore::open(&config.feedback_log_path())?;
        Ok(Self {
            policy: config.policy(),
            library,
            engine: RwLock::new(None),
            sessions: Mutex::new(HashMap::new()),
            registry: Mutex::new(Vec::new()),
            audit: Mutex::new(audit),
            feedback: Mutex::new(feedback),
            factory: SessionFactory::random(),
            reloading: AtomicBool::new(false),
            config,
        })
    }

    /// `new` followed by a blocking model load.
    pub fn start(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.check_paths()?;
        let state = Self::new(config)?;
        state.load_engine()?;
        Ok(state)
    }

    pub fn load_engine(&self) -> Result<(), ServiceError> {
        let engine =
            Engine::load(&self.config.corpus_path, &self.config.model_path, &self.config.state_label)?;
        self.install(engine);
        Ok(())
    }

    pub fn install(&self, engine: Engine) {
        *self.engine.write().expect("engine lock") = Some(Arc::new(engine));
    }

    pub fn engine(&self) -> Option<Arc<Engine>> {
        self.engine.read().expect("engine lock").clone()
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn try_begin_reload(&self) -> Option<ReloadGuard<'_>> {
        self.reloading
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .ok()
            .map(|_| ReloadGuard(&self.reloading))
    }

    pub fn sessions(&self) -> Vec<SessionInfo> {
        self.registry.lock().expect("registry lock").clone()
    }

    pub fn feedback(&self) -> Vec<FeedbackRecord> {
        self.feedback.lock().expect("feedback lock").records.clone()
    }

    fn audit_bytes(&self) -> Result<Vec<u8>, AuditError> {
        self.audit.lock().expect("audit lock").snapshot()
    }

    /// Retrains on `corpus_path` (or the configured corpus), saves the model
    /// and swaps it in. On any error the previous engine keeps serving.
    pub fn reload_corpus(&self, corpus_path: Option<&Path>) -> Result<(String, Option<String>), ServiceError> {
        let path = corpus_path.unwrap_or(&self.config.corpus_path);
        let corpus = load_corpus(path, &self.config.state_label)?;
        let engine = Engine::train(corpus, self.config.paraphrase_k)?;
        engine.model.save(&self.config.model_path)?;
        let new_hash = engine.corpus_hash().to_string();
        let previous = self.engine().map(|e| e.corpus_hash().to_string());
        {
            let mut slot = self.engine.write().expect("engine lock");
            *slot = Some(Arc::new(engine));
        }
        let text = format!("corpus reloaded: {} -> {new_hash}", previous.as_deref().unwrap_or("none"));
        self.audit.lock().expect("audit lock").append(AuditPayload {
            session_id: SYSTEM_SESSION.to_string(),
            user_utterance: String::new(),
            decision: DecisionSummary {
                kind: ResponseKind::System,
                text,
                intent: None,
                entry_id: None,
                source_url: Some(path.display().to_string()),
                rule: None,
            },
            confidence: None,
            corpus_hash: new_hash.clone(),
        })?;
        Ok((new_hash, previous))
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        Self(status, msg.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn not_ready() -> ApiError {
    ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model not loaded")
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionResponse {
    pub session_id: String,
    pub greeting: String,
    pub variant: Variant,
}

async fn open_session_handler(State(st): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Json<SessionResponse>> {
    st.engine().ok_or_else(not_ready)?;
    let token = headers.get(USER_TOKEN_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string);
    let user_id = token.unwrap_or_else(|| format!("anon-{:016x}", rand::random::<u64>()));
    let variant =
        if st.config.rct_enabled { assign(&user_id, st.config.rct_seed).variant } else { Variant::Experimental };
    let (session, greeting) = st.factory.open_session(&st.library, variant);
    let session_id = session.session_id().to_string();
    st.registry.lock().expect("registry lock").push(SessionInfo { session_id: session_id.clone(), user_id, variant });
    st.sessions
        .lock()
        .expect("sessions lock")
        .insert(session_id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok(Json(SessionResponse { session_id, greeting, variant }))
}

#[derive(Debug, Deserialize)]
pub struct ChatRequest {
    pub session_id: String,
    pub utterance: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChatResponse {
    #[serde(flatten)]
    pub response: crate::dialogue::BotResponse,
    pub corpus_hash: String,
}

fn lookup(st: &AppState, session_id: &str) -> ApiResult<Arc<tokio::sync::Mutex<Session>>> {
    st.sessions
        .lock()
        .expect("sessions lock")
        .get(session_id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session `{session_id}`")))
}

async fn chat_handler(State(st): State<Arc<AppState>>, Json(req): Json<ChatRequest>) -> ApiResult<Json<ChatResponse>> {
    let handle = lookup(&st, &req.session_id)?;
    // per-session turn ordering
    let mut session = handle.lock().await;
    if session.is_closed() {
        return Err(ApiError::new(StatusCode::CONFLICT, "session is closed"));
    }
    if req.utterance.trim().is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "utterance is empty"));
    }
    let engine = st.engine().ok_or_else(not_ready)?;
    let ctx = TurnContext { model: &engine.model, corpus: &engine.corpus, policy: &st.policy, library: &st.library };
    let result = {
        let mut audit = st.audit.lock().expect("audit lock");
        handle_turn(&mut session, &req.utterance, ctx, &mut audit)
    };
    match result {
        Ok(response) => Ok(Json(ChatResponse { response, corpus_hash: engine.corpus_hash().to_string() })),
        Err(DialogueError::SessionClosed(_)) => Err(ApiError::new(StatusCode::CONFLICT, "session is closed")),
        Err(e @ DialogueError::AuditFailed { .. }) => {
            tracing::error!(error = %e, "audit append failed; response withheld");
            Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "audit storage unavailable"))
        }
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

#[derive(Debug, Deserialize)]
pub struct FeedbackRequest {
    pub session_id: String,
    pub entry_id: String,
    pub score: i64,
}

async fn feedback_handler(State(st): State<Arc<AppState>>, Json(req): Json<FeedbackRequest>) -> ApiResult<StatusCode> {
    let handle = lookup(&st, &req.session_id)?;
    if !(1..=5).contains(&req.score) {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("score {} is outside 1..=5", req.score)));
    }
    let engine = st.engine().ok_or_else(not_ready)?;
    let mut session = handle.lock().await;
    if !session.answered().contains(&req.entry_id) {
        return Err(ApiError::new(StatusCode::CONFLICT, FeedbackError::NotAnswered(req.entry_id).to_string()));
    }
    let record = FeedbackRecord::new(&req.session_id, &req.entry_id, session.variant(), req.score, &engine.corpus, Utc::now())
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    session.accept_feedback(&req.entry_id).map_err(|e| ApiError::new(StatusCode::CONFLICT, e.to_string()))?;
    st.feedback
        .lock()
        .expect("feedback lock")
        .append(record)
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, format!("feedback storage: {e}")))?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TranscriptResponse {
    pub session_id: String,
    pub turns: Vec<TranscriptTurn>,
}

async fn transcript_handler(
    State(st): State<Arc<AppState>>,
    UrlPath(session_id): UrlPath<String>,
) -> ApiResult<Json<TranscriptResponse>> {
    let bytes = st.audit_bytes().map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    match replay_bytes(&bytes, &session_id) {
        Ok(turns) => Ok(Json(TranscriptResponse { session_id, turns })),
        Err(AuditError::UnknownSession(_)) => Err(ApiError::new(StatusCode::NOT_FOUND, "unknown session")),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

fn check_admin(st: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    let Some(expected) = st.config.admin_token.as_deref() else {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "admin endpoints are disabled"));
    };
    let given = headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if given != Some(expected) {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid admin token"));
    }
    Ok(())
}

async fn metrics_handler(State(st): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Json<HealthMetrics>> {
    check_admin(&st, &headers)?;
    let bytes = st.audit_bytes().map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(compute_metrics(&parse_records(&bytes), &st.sessions(), DEFAULT_CONFUSION_TOP_K)))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReloadRequest {
    pub corpus_path: Option<PathBuf>,
}

async fn reload_handler(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    check_admin(&st, &headers)?;
    let req: ReloadRequest = if body.iter().all(u8::is_ascii_whitespace) {
        ReloadRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?
    };
    let worker = st.clone();
    let result = tokio::task::spawn_blocking(move || {
        let Some(_guard) = worker.try_begin_reload() else {
            return Err(ApiError::new(StatusCode::LOCKED, "reload already in progress"));
        };
        worker.reload_corpus(req.corpus_path.as_deref()).map_err(|e| match e {
            ServiceError::Corpus(_) | ServiceError::Paraphrase(_) | ServiceError::Model(NluError::MissingParaphrases(_)) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
            }
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let (hash, previous) = result?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "corpus_hash": hash, "previous_corpus_hash": previous }))))
}

async fn health_handler(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let engine = st.engine();
    Json(json!({
        "bot_name": st.config.bot_name,
        "ready": engine.is_some(),
        "corpus_hash": engine.as_ref().map(|e| e.corpus_hash().to_string()),
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health_handler))
        .route("/api/session", post(open_session_handler))
        .route("/api/chat", post(chat_handler))
        .route("/api/feedback", post(feedback_handler))
        .route("/api/transcript/{session_id}", get(transcript_handler))
        .route("/api/admin/metrics", get(metrics_handler))
        .route("/api/admin/corpus/reload", post(reload_handler))
        .with_state(state)
}

/// Binds and serves until ctrl-c. The model loads in the background; chat
/// calls get 503 until it is ready.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    config.check_paths()?;
    let addr = config.listen_addr();
    let state = Arc::new(AppState::new(config)?);
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match loader.load_engine() {
        Ok(()) => tracing::info!("model loaded"),
        Err(e) => tracing::error!(error = %e, "model load failed"),
    });
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
