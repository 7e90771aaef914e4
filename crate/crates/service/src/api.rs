//! HTTP session service for live, human-driven retrieval sessions.
//!
//! Sessions live in memory for the lifetime of the process. Each session is
//! driven by one round at a time: a second round request while one is
//! running gets `409 Conflict`.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter};
use std::path::Path;
use std::sync::{Arc, Mutex as StdMutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{error, info};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{Mutex, RwLock};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use genir_core::curation::{records_from_trace, write_trajectories};
use genir_core::session::{
    Engine, FeedbackMode, ModeKind, RoundRecord, Session, SessionConfig, SessionError,
    SessionStatus, SessionTrace, Stage, SuccessRule,
};

use crate::config::SessionDefaults;

pub const GENERATED_PREFIX: &str = "gen";
pub const DATABASE_PREFIX: &str = "db";

type SharedSession = Arc<Mutex<Session>>;

pub struct AppState {
    engine: Arc<Engine>,
    defaults: SessionDefaults,
    sessions: RwLock<HashMap<String, SharedSession>>,
    log: Option<StdMutex<BufWriter<File>>>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>, defaults: SessionDefaults) -> Self {
        Self {
            engine,
            defaults,
            sessions: RwLock::new(HashMap::new()),
            log: None,
        }
    }

    /// Appends completed sessions to `path` as trajectory records.
    pub fn with_trajectory_log(mut self, path: &Path) -> io::Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        self.log = Some(StdMutex::new(BufWriter::new(f)));
        Ok(self)
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    fn append_log(&self, trace: &SessionTrace) -> io::Result<()> {
        let Some(log) = &self.log else {
            return Ok(());
        };
        let mut w = log.lock().unwrap_or_else(|p| p.into_inner());
        write_trajectories(&mut *w, &records_from_trace(trace))
            .map_err(|e| io::Error::other(e.to_string()))
    }
}

pub fn router(state: Arc<AppState>, cors_origins: &[String]) -> Router {
    let cors = CorsLayer::new()
        .allow_methods(Any)
        .allow_headers(Any);
    let cors = if cors_origins.is_empty() {
        cors.allow_origin(Any)
    } else {
        let origins: Vec<HeaderValue> = cors_origins
            .iter()
            .filter_map(|o| HeaderValue::from_str(o).ok())
            .collect();
        cors.allow_origin(AllowOrigin::list(origins))
    };
    Router::new()
        .route("/api/health", get(health))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/rounds", post(post_round))
        .route("/api/sessions/{id}/complete", post(complete_session))
        .route("/api/images/{*reference}", get(get_image))
        .layer(cors)
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    stage: Option<Stage>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            stage: None,
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::UnknownTarget(_) => StatusCode::NOT_FOUND,
            SessionError::SessionFinished => StatusCode::GONE,
            SessionError::InvalidConfig(_) | SessionError::EmptyQuery | SessionError::WrongMode => {
                StatusCode::BAD_REQUEST
            }
            SessionError::Stage { .. } => StatusCode::BAD_GATEWAY,
            SessionError::Index(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let stage = match &e {
            SessionError::Stage { stage, .. } => Some(*stage),
            _ => None,
        };
        Self {
            status,
            message: e.to_string(),
            stage,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(stage) = self.stage {
            body["stage"] = json!(stage);
        }
        (self.status, Json(body)).into_response()
    }
}

/// Parses a JSON body, answering 400 for anything malformed. An empty body
/// reads as `{}`.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let text: &[u8] = if body.iter().all(u8::is_ascii_whitespace) {
        b"{}"
    } else {
        body
    };
    serde_json::from_slice(text)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid body: {e}")))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let index = state.engine.index();
    Json(json!({ "status": "ok", "index_size": index.len(), "dim": index.dim() }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    pub mode: Option<ModeKind>,
    pub visual_fraction: Option<f64>,
    pub k: Option<usize>,
    pub max_rounds: Option<u32>,
    pub target_id: Option<String>,
    pub success_rule: Option<SuccessRule>,
}

impl CreateSessionRequest {
    fn config(&self, defaults: &SessionDefaults) -> SessionConfig {
        let mut cfg = defaults.live_config();
        if let Some(kind) = self.mode {
            cfg.mode = FeedbackMode {
                kind,
                visual_fraction: self.visual_fraction,
            };
        } else if self.visual_fraction.is_some() {
            cfg.mode.visual_fraction = self.visual_fraction;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(t) = self.max_rounds {
            cfg.max_rounds = t;
        }
        if let Some(rule) = self.success_rule {
            cfg.success_rule = rule;
        }
        cfg
    }
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let req: CreateSessionRequest = parse_body(&body)?;
    let config = req.config(&state.defaults);
    let session = state
        .engine
        .create_session(config, req.target_id.as_deref())?;
    let id = session.id().to_string();
    state
        .sessions
        .write()
        .await
        .insert(id.clone(), Arc::new(Mutex::new(session)));
    info!("session {id} created ({})", config.mode.kind);
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))))
}

async fn lookup(state: &AppState, id: &str) -> Result<SharedSession, ApiError> {
    state
        .sessions
        .read()
        .await
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown session {id:?}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedView {
    pub id: String,
    pub image_url: String,
    pub similarity: f32,
}

/// One round as shown to the searcher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiRoundView {
    pub round: u32,
    pub query: String,
    pub synthetic_image_url: Option<String>,
    pub retrieved: Vec<RetrievedView>,
    pub rank_of_target: Option<usize>,
    pub status: SessionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn generated_image_url(reference: &str) -> String {
    format!("/api/images/{GENERATED_PREFIX}/{reference}")
}

pub fn database_image_url(id: &str) -> String {
    format!("/api/images/{DATABASE_PREFIX}/{id}")
}

impl ApiRoundView {
    pub fn new(record: &RoundRecord, status: SessionStatus) -> Self {
        Self {
            round: record.round,
            query: record.query.clone(),
            synthetic_image_url: record.synthetic_image_ref.as_deref().map(generated_image_url),
            retrieved: record
                .retrieved
                .entries
                .iter()
                .map(|e| RetrievedView {
                    id: e.id.clone(),
                    image_url: database_image_url(&e.id),
                    similarity: e.similarity,
                })
                .collect(),
            rank_of_target: record.rank_of_target,
            status,
            error: record.error.as_ref().map(|f| format!("{}: {}", f.stage, f.message)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub status: SessionStatus,
    pub rounds: Vec<ApiRoundView>,
    /// The full engine trace.
    pub trace: SessionTrace,
}

impl SessionView {
    fn new(trace: &SessionTrace) -> Self {
        Self {
            session_id: trace.session_id.clone(),
            status: trace.status,
            rounds: trace
                .rounds
                .iter()
                .map(|r| ApiRoundView::new(r, trace.status))
                .collect(),
            trace: trace.clone(),
        }
    }
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<SessionView>, ApiError> {
    let session = lookup(&state, &id).await?;
    let guard = session.lock().await;
    Ok(Json(SessionView::new(guard.trace())))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoundRequest {
    query: String,
}

async fn post_round(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<ApiRoundView>, ApiError> {
    let session = lookup(&state, &id).await?;
    let req: RoundRequest = parse_body(&body)?;
    let mut guard = session.try_lock_owned().map_err(|_| {
        ApiError::new(
            StatusCode::CONFLICT,
            format!("a round for session {id:?} is already in flight"),
        )
    })?;
    let engine = state.engine.clone();
    // Backends may block, so rounds run off the async workers.
    tokio::task::spawn_blocking(move || {
        let session = &mut *guard;
        let record = engine.run_round(session, &req.query)?.clone();
        Ok(ApiRoundView::new(&record, session.trace().status))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map(Json)
    .map_err(|e: SessionError| ApiError::from(e))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompleteRequest {
    found_id: Option<String>,
}

async fn complete_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<SessionTrace>, ApiError> {
    let session = lookup(&state, &id).await?;
    let req: CompleteRequest = parse_body(&body)?;
    let mut guard = session.try_lock_owned().map_err(|_| {
        ApiError::new(
            StatusCode::CONFLICT,
            format!("a round for session {id:?} is in flight"),
        )
    })?;
    state.engine.complete(&mut guard, req.found_id.as_deref())?;
    let trace = guard.trace().clone();
    drop(guard);
    if let Err(e) = state.append_log(&trace) {
        error!("trajectory log write failed for {id}: {e}");
    }
    info!("session {id} completed as {:?}", trace.status);
    Ok(Json(trace))
}

async fn get_image(
    State(state): State<Arc<AppState>>,
    UrlPath(reference): UrlPath<String>,
) -> Result<Response, ApiError> {
    let missing = || ApiError::not_found(format!("no image at {reference:?}"));
    let (kind, rest) = reference.split_once('/').ok_or_else(missing)?;
    let blob = match kind {
        GENERATED_PREFIX => state.engine.store().get(rest).ok_or_else(missing)?,
        DATABASE_PREFIX => {
            if !state.engine.index().contains(rest) {
                return Err(missing());
            }
            let engine = state.engine.clone();
            let id = rest.to_string();
            tokio::task::spawn_blocking(move || engine.database_image(&id))
                .await
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
                .map_err(ApiError::not_found)?
        }
        _ => return Err(missing()),
    };
    Ok((
        [(header::CONTENT_TYPE, blob.format().content_type())],
        blob.bytes().to_vec(),
    )
        .into_response())
}
