//! HTTP API over the session engine. Every round runs on the blocking pool
//! while holding that session's lock, so a session has at most one
//! generation in flight while distinct sessions proceed independently.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cogen_core::engine::Engine;
use cogen_core::nn::mix_seed;
use cogen_core::session::{Choice, SessionMode, SessionRecord};
use cogen_core::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Engine>,
    locks: Arc<Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>>,
    counter: Arc<AtomicU64>,
    seed: u64,
}

impl AppState {
    pub fn new(engine: Engine, seed: u64) -> Self {
        AppState { engine: Arc::new(engine), locks: Arc::default(), counter: Arc::default(), seed }
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    fn lock_for(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.locks.lock().expect("lock table poisoned").entry(id.to_string()).or_default().clone()
    }
}

pub struct ApiError(StatusCode, String);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::SessionNotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::InvalidArgument(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> cogen_core::Result<T> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub mode: SessionMode,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Message {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MessageReply {
    pub response: String,
    pub round: usize,
    pub images: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Preference {
    pub round: usize,
    pub choice: Choice,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Ack {
    pub ack: bool,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/message", post(message))
        .route("/sessions/{id}/preference", post(preference))
        .route("/images/{*path}", get(image))
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create_session(State(st): State<AppState>, Json(req): Json<CreateSession>) -> ApiResult<(StatusCode, Json<Created>)> {
    let (id, seed) = loop {
        let n = st.counter.fetch_add(1, Ordering::SeqCst);
        let seed = mix_seed(st.seed, &[n]);
        let id = format!("s{seed:016x}");
        if !st.engine.store.exists(&id) {
            break (id, req.seed.unwrap_or(seed));
        }
    };
    let engine = st.engine.clone();
    let mode = req.mode;
    let created = blocking(move || engine.create_session(&id, mode, seed)).await?;
    Ok((StatusCode::CREATED, Json(Created { id: created.id })))
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionRecord>> {
    let engine = st.engine.clone();
    Ok(Json(blocking(move || engine.store.load(&id)).await?))
}

async fn message(State(st): State<AppState>, Path(id): Path<String>, Json(req): Json<Message>) -> ApiResult<Json<MessageReply>> {
    if req.text.trim().is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "text must not be empty".into()));
    }
    let lock = st.lock_for(&id);
    let _guard = lock.lock().await;
    let engine = st.engine.clone();
    let turn = blocking(move || {
        let mut session = engine.store.load(&id)?;
        engine.message(&mut session, &req.text)
    })
    .await?;
    Ok(Json(MessageReply {
        response: turn.response,
        round: turn.round,
        images: turn.images.iter().map(|p| format!("/images/{p}")).collect(),
        question: turn.question,
    }))
}

async fn preference(State(st): State<AppState>, Path(id): Path<String>, Json(req): Json<Preference>) -> ApiResult<Json<Ack>> {
    let lock = st.lock_for(&id);
    let _guard = lock.lock().await;
    let engine = st.engine.clone();
    blocking(move || {
        let mut session = engine.store.load(&id)?;
        engine.record_preference(&mut session, req.round, req.choice)
    })
    .await?;
    Ok(Json(Ack { ack: true }))
}

async fn image(State(st): State<AppState>, Path(path): Path<String>) -> ApiResult<Response> {
    let engine = st.engine.clone();
    let bytes = blocking(move || match engine.store.load_image(&path) {
        Ok(b) => Ok(Some(b)),
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    })
    .await?;
    match bytes {
        Some(b) => Ok(([(header::CONTENT_TYPE, "image/png")], b).into_response()),
        None => Err(ApiError(StatusCode::NOT_FOUND, "image not found".into())),
    }
}
