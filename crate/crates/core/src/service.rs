//! HTTP API over the engine with durable analyst sessions.
//!
//! A session keeps the entities of every earlier turn. Each new question is
//! answered with those entities merged under its own, so a follow-up that
//! names no host or interval still filters to the ones already in play. A
//! turn whose question names no interval contributes the time span of the
//! evidence it cited.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path as UrlPath, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::sync::Mutex as AsyncMutex;

use crate::engine::{Answer, Engine, EngineError};
use crate::generation::{GenerationError, Verdict};
use crate::kb::{CollectionId, KBEntry, MetadataFilter};
use crate::retrieval::{extract_entities, Gate, QueryEntities, RetrievalItem, StageCounts, TimeRange};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session io: {0}")]
    Io(#[from] std::io::Error),
    #[error("session file {path}: {source}")]
    Corrupt { path: PathBuf, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub verdict: Verdict,
    pub timestamp: DateTime<Utc>,
    /// Entities the retrieval filter was built from for this turn.
    pub entities: QueryEntities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub turns: Vec<Turn>,
    /// Entities carried into the next turn.
    pub context: QueryEntities,
}

impl Session {
    pub fn new(now: DateTime<Utc>) -> Self {
        Self {
            session_id: uuid::Uuid::new_v4().to_string(),
            created_at: now,
            updated_at: now,
            turns: Vec::new(),
            context: QueryEntities::default(),
        }
    }

    /// Entities for the next question: the carried context with the
    /// question's own entities folded in last.
    pub fn entities_for(&self, question: &str) -> QueryEntities {
        let mut e = self.context.clone();
        e.merge(&extract_entities(question));
        e
    }

    /// Appends a turn and folds its entities into the carried context.
    pub fn record_turn(&mut self, question: &str, answer: &Answer, now: DateTime<Utc>) {
        let mut own = extract_entities(question);
        if own.time_range.is_none() {
            own.time_range = cited_span(&answer.verdict, &answer.retrieval.items);
        }
        self.context.merge(&own);
        self.turns.push(Turn {
            question: question.to_string(),
            verdict: answer.verdict.clone(),
            timestamp: now,
            entities: answer.entities.clone(),
        });
        self.updated_at = now;
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
}

/// Sessions on disk, one JSON file each, with an in-memory lock per id.
pub struct SessionStore {
    dir: PathBuf,
    ttl: Duration,
    live: parking_lot::Mutex<HashMap<String, Arc<AsyncMutex<Session>>>>,
}

impl SessionStore {
    pub fn open(dir: impl AsRef<Path>, ttl: Duration) -> Result<Self, SessionError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir, ttl, live: parking_lot::Mutex::new(HashMap::new()) })
    }

    fn file(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    fn expired(&self, s: &Session, now: DateTime<Utc>) -> bool {
        (now - s.updated_at).to_std().is_ok_and(|idle| idle > self.ttl)
    }

    fn load(&self, id: &str) -> Result<Option<Session>, SessionError> {
        let path = self.file(id);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        serde_json::from_str(&text).map(Some).map_err(|source| SessionError::Corrupt { path, source })
    }

    /// The live handle for `id`, or `None` when unknown or idle past the TTL.
    pub fn get(&self, id: &str, now: DateTime<Utc>) -> Result<Option<Arc<AsyncMutex<Session>>>, SessionError> {
        if !valid_id(id) {
            return Ok(None);
        }
        let cached = self.live.lock().get(id).cloned();
        if let Some(h) = cached {
            let stale = h.try_lock().map(|s| self.expired(&s, now)).unwrap_or(false);
            if !stale {
                return Ok(Some(h));
            }
            self.remove(id)?;
            return Ok(None);
        }
        match self.load(id)? {
            Some(s) if self.expired(&s, now) => {
                self.remove(id)?;
                Ok(None)
            }
            Some(s) => {
                let mut live = self.live.lock();
                Ok(Some(live.entry(id.to_string()).or_insert_with(|| Arc::new(AsyncMutex::new(s))).clone()))
            }
            None => Ok(None),
        }
    }

    pub fn create(&self, now: DateTime<Utc>) -> Result<Arc<AsyncMutex<Session>>, SessionError> {
        let s = Session::new(now);
        self.save(&s)?;
        let h = Arc::new(AsyncMutex::new(s.clone()));
        self.live.lock().insert(s.session_id, h.clone());
        Ok(h)
    }

    pub fn save(&self, s: &Session) -> Result<(), SessionError> {
        let path = self.file(&s.session_id);
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec_pretty(s).expect("session serializes");
        std::fs::write(&tmp, body)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }

    fn remove(&self, id: &str) -> Result<(), SessionError> {
        self.live.lock().remove(id);
        match std::fs::remove_file(self.file(id)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }

    /// Deletes every session idle past the TTL. Returns how many went.
    pub fn sweep(&self, now: DateTime<Utc>) -> Result<usize, SessionError> {
        let mut n = 0;
        for entry in std::fs::read_dir(&self.dir)? {
            let path = entry?.path();
            let Some(id) = path.file_name().and_then(|f| f.to_str()).and_then(|f| f.strip_suffix(".json")) else {
                continue;
            };
            if matches!(self.load(id), Ok(Some(s)) if self.expired(&s, now)) {
                self.remove(id)?;
                n += 1;
            }
        }
        Ok(n)
    }
}

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub sessions: Arc<SessionStore>,
    pub auth_token: Option<String>,
}

impl AppState {
    pub fn new(engine: Engine, sessions: SessionStore, auth_token: Option<String>) -> Self {
        Self { engine: Arc::new(engine), sessions: Arc::new(sessions), auth_token }
    }
}

#[derive(Debug, Deserialize)]
pub struct QueryRequest {
    pub question: String,
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Diagnostics {
    pub gate: Gate,
    pub messages: Vec<String>,
    pub counts: StageCounts,
    pub filter: MetadataFilter,
    pub entities: QueryEntities,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    pub session_id: String,
    pub verdict: Verdict,
    pub evidence: Vec<RetrievalItem>,
    pub diagnostics: Diagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvidenceResponse {
    pub collection: CollectionId,
    #[serde(flatten)]
    pub entry: KBEntry,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CollectionsResponse {
    pub dim: usize,
    pub collections: std::collections::BTreeMap<CollectionId, usize>,
}

struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, msg: impl std::fmt::Display) -> Self {
        let kind = match status {
            StatusCode::NOT_FOUND => "not_found",
            StatusCode::UNAUTHORIZED => "unauthorized",
            _ => "internal",
        };
        let msg = msg.to_string();
        Self { status, body: json!({ "error": msg, "kind": kind, "diagnostics": [msg] }) }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::EmptyQuestion => StatusCode::BAD_REQUEST,
            _ if e.is_backend_unavailable() => StatusCode::SERVICE_UNAVAILABLE,
            EngineError::Generation(
                GenerationError::UnverifiedCitation(_)
                | GenerationError::SchemaViolation(_)
                | GenerationError::UnknownDecision(_),
            ) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let kind = match &e {
            EngineError::Generation(GenerationError::UnverifiedCitation(_)) => "unverified_citation",
            EngineError::Generation(_) => "generation",
            EngineError::EmptyQuestion => "empty_question",
            _ if e.is_backend_unavailable() => "backend_unavailable",
            _ => "internal",
        };
        ApiError { status, body: json!({ "error": e.to_string(), "kind": kind, "diagnostics": [e.to_string()] }) }
    }
}

/// Span of the timestamps on the evidence a verdict cited.
fn cited_span(verdict: &Verdict, evidence: &[RetrievalItem]) -> Option<TimeRange> {
    let ts: Vec<_> = evidence
        .iter()
        .filter(|i| verdict.citations.contains(&i.entry_id))
        .filter_map(|i| i.meta.ts)
        .collect();
    Some(TimeRange { start: *ts.iter().min()?, end: *ts.iter().max()? })
}

async fn query(State(st): State<AppState>, Json(req): Json<QueryRequest>) -> Result<Json<QueryResponse>, ApiError> {
    if req.question.trim().is_empty() {
        return Err(EngineError::EmptyQuestion.into());
    }
    let now = Utc::now();
    let mut warning = None;
    let handle = match &req.session_id {
        Some(id) => match st.sessions.get(id, now)? {
            Some(h) => h,
            None => {
                warning = Some(format!("unknown or expired session `{id}`; started a new session"));
                st.sessions.create(now)?
            }
        },
        None => st.sessions.create(now)?,
    };
    let mut session = handle.lock().await;
    let entities = session.entities_for(&req.question);
    let engine = st.engine.clone();
    let (q, e) = (req.question.clone(), entities.clone());
    let answer = tokio::task::spawn_blocking(move || engine.answer_with_entities(&q, &e))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))??;

    session.record_turn(&req.question, &answer, Utc::now());
    st.sessions.save(&session)?;

    let r = answer.retrieval;
    Ok(Json(QueryResponse {
        session_id: session.session_id.clone(),
        verdict: answer.verdict,
        evidence: r.items,
        diagnostics: Diagnostics { gate: r.gate, messages: r.diagnostics, counts: r.counts, filter: r.filter, entities },
        warning,
    }))
}

async fn evidence(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<EvidenceResponse>, ApiError> {
    match st.engine.store().find(&id) {
        Some((collection, entry)) => Ok(Json(EvidenceResponse { collection, entry })),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, format!("no evidence with id `{id}`"))),
    }
}

async fn collections(State(st): State<AppState>) -> Json<CollectionsResponse> {
    let stats = st.engine.store().stats();
    let mut collections: std::collections::BTreeMap<CollectionId, usize> =
        CollectionId::ALL.iter().map(|c| (*c, 0)).collect();
    collections.extend(stats.collections);
    Json(CollectionsResponse { dim: stats.dim, collections })
}

async fn session(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<Session>, ApiError> {
    match st.sessions.get(&id, Utc::now())? {
        Some(h) => Ok(Json(h.lock().await.clone())),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, format!("no session `{id}`"))),
    }
}

async fn require_token(State(st): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &st.auth_token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/query", post(query))
        .route("/api/evidence/{entry_id}", get(evidence))
        .route("/api/collections", get(collections))
        .route("/api/sessions/{session_id}", get(session))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// Binds and serves until the process is stopped.
pub async fn serve(state: AppState, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(state)).await
}
