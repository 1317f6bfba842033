use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use cogen_core::config::RunConfig;
use cogen_core::diffusion::Denoiser;
use cogen_core::embedder::{default_vocab, EmbeddingModel};
use cogen_core::engine::Engine;
use cogen_core::explicit::GrammarSummarizer;
use cogen_core::pipeline::generator_for;
use cogen_core::session::{SessionMode, SessionRecord, SessionStore};
use cogen_service::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(dir: &std::path::Path) -> Router {
    let cfg = RunConfig::tiny();
    let embedder = Arc::new(EmbeddingModel::new(cfg.embedder, default_vocab(), 1).unwrap());
    let denoiser = Arc::new(Denoiser::new(cfg.denoiser, cfg.schedule.build().unwrap(), 2).unwrap());
    let engine = Engine {
        generator: generator_for(&cfg, embedder, denoiser),
        summarizer: Arc::new(GrammarSummarizer),
        tau: cfg.tau,
        store: SessionStore::new(dir).unwrap(),
        checkpoint: "tiny".into(),
    };
    router(AppState::new(engine, 5))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn create(app: &Router, mode: &str) -> String {
    let (s, v) = call_json(app, "POST", "/sessions", Some(json!({ "mode": mode }))).await;
    assert_eq!(s, StatusCode::CREATED);
    v["id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_reports_ok() {
    let dir = tempfile::tempdir().unwrap();
    let (s, v) = call_json(&app(dir.path()), "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({ "status": "ok" }));
}

#[tokio::test]
async fn inference_session_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, "inference").await;
    let (s, v) = call_json(&app, "POST", &format!("/sessions/{id}/message"), Some(json!({ "text": "a red circle" }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["round"], 1);
    assert!(v.get("question").is_none());
    let images = v["images"].as_array().unwrap();
    assert_eq!(images.len(), 1);
    let (s, png) = call(&app, "GET", images[0].as_str().unwrap(), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&png[..4], b"\x89PNG");

    let (s, _) = call_json(&app, "POST", &format!("/sessions/{id}/preference"), Some(json!({ "round": 1, "choice": "A" }))).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, v) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    let record: SessionRecord = serde_json::from_value(v).unwrap();
    assert_eq!(record.mode, SessionMode::Inference);
    assert_eq!(record.rounds.len(), 1);
    assert!(record.rounds[0].ambiguity.is_none());
    assert_eq!(record.rounds[0].prompt.slots.color, Some(cogen_core::scene::Color::Red));
}

#[tokio::test]
async fn training_session_collects_preferences() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, "training").await;
    for (k, text) in ["a square", "make it blue"].iter().enumerate() {
        let (s, v) = call_json(&app, "POST", &format!("/sessions/{id}/message"), Some(json!({ "text": text }))).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["round"], k + 1);
        assert_eq!(v["images"].as_array().unwrap().len(), 2);
    }
    let uri = format!("/sessions/{id}/preference");
    let (s, v) = call_json(&app, "POST", &uri, Some(json!({ "round": 2, "choice": "B" }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({ "ack": true }));
    let (s, _) = call_json(&app, "POST", &uri, Some(json!({ "round": 2, "choice": "A" }))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call_json(&app, "POST", &uri, Some(json!({ "round": 7, "choice": "A" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (_, v) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    let record: SessionRecord = serde_json::from_value(v).unwrap();
    assert_eq!(record.rounds.len(), 2);
    assert!(record.rounds.iter().all(|r| r.ambiguity.is_some() && r.images.len() == 2));
    assert_eq!(record.rounds[1].preference, Some(cogen_core::session::Choice::B));
    let pairs = std::fs::read_to_string(dir.path().join("pairs.jsonl")).unwrap();
    assert_eq!(pairs.lines().count(), 1);
    let pair: Value = serde_json::from_str(pairs.lines().next().unwrap()).unwrap();
    assert_eq!(pair["winner_seed"], json!(record.rounds[1].seeds[1]));
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (s, _) = call_json(&app, "GET", "/sessions/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call_json(&app, "POST", "/sessions/nope/message", Some(json!({ "text": "red" }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let id = create(&app, "inference").await;
    let (s, _) = call_json(&app, "POST", &format!("/sessions/{id}/message"), Some(json!({ "text": "   " }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "GET", "/images/missing/1_0.png", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/images/a/%2E%2E/%2E%2E/secret", None).await;
    assert_ne!(s, StatusCode::OK);
    let (s, _) = call_json(&app, "POST", "/sessions", Some(json!({ "mode": "other" }))).await;
    assert!(s.is_client_error());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_messages_serialize_per_session() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, "inference").await;
    let other = create(&app, "inference").await;
    let mut tasks = Vec::new();
    for (sid, text) in [(&id, "red"), (&id, "a circle"), (&other, "blue"), (&id, "on the left")] {
        let app = app.clone();
        let uri = format!("/sessions/{sid}/message");
        tasks.push(tokio::spawn(async move { call_json(&app, "POST", &uri, Some(json!({ "text": text }))).await }));
    }
    let mut rounds = Vec::new();
    for t in tasks {
        let (s, v) = t.await.unwrap();
        assert_eq!(s, StatusCode::OK);
        rounds.push(v["round"].as_u64().unwrap());
    }
    let (_, v) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    let record: SessionRecord = serde_json::from_value(v).unwrap();
    assert_eq!(record.rounds.iter().map(|r| r.round).collect::<Vec<_>>(), vec![1, 2, 3]);
    let mut mine: Vec<u64> = [0, 1, 3].iter().map(|&i| rounds[i]).collect();
    mine.sort();
    assert_eq!(mine, vec![1, 2, 3]);
    assert_eq!(rounds[2], 1);
}
