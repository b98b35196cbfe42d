use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use gbmdebug::shapes::DataConfig;
use gbmdebug_service::{router, AppState};

fn data() -> Value {
    serde_json::to_value(DataConfig {
        train_per_class: 6,
        validation_per_class: 2,
        test_per_class: 4,
        ..DataConfig::default()
    })
    .unwrap()
}

fn quick_config(epochs: usize) -> Value {
    json!({"schedule": {"initial_epochs": epochs, "refine_epochs": epochs, "phase_length": 1}})
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = to_bytes(res.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn create(app: &Router, id: &str, config: Value) -> Value {
    let (status, body) = call(
        app,
        "POST",
        "/sessions",
        Some(json!({"id": id, "dataset": "tiny", "generate": data(), "config": config})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body
}

async fn wait_idle(app: &Router, id: &str) -> Value {
    for _ in 0..600 {
        let (status, body) = call(app, "GET", &format!("/sessions/{id}/metrics"), None).await;
        assert_eq!(status, StatusCode::OK);
        if body["data"]["state"] != "training" {
            return body;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("round did not finish");
}

fn app(dir: &tempfile::TempDir) -> Router {
    router(Arc::new(AppState::new(dir.path())))
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_debugging_loop() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir);
    let created = create(&app, "s1", quick_config(2)).await;
    assert_eq!(created["ok"], true);
    assert_eq!(created["data"]["state"], "idle");

    let (status, body) = call(&app, "GET", "/sessions/s1/concepts", None).await;
    assert_eq!(status, StatusCode::CONFLICT, "{body}");

    let (status, body) = call(&app, "POST", "/sessions/s1/rounds", None).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{body}");
    assert_eq!(body["data"]["round"], 1);
    let page = wait_idle(&app, "s1").await;
    assert_eq!(page["data"]["state"], "awaiting_feedback");
    assert_eq!(page["data"]["records"].as_array().unwrap().len(), 2);

    let (status, body) = call(&app, "GET", "/sessions/s1/concepts", None).await;
    assert_eq!(status, StatusCode::OK);
    let cards = body["data"].as_array().unwrap();
    assert_eq!(cards.len(), 10);
    assert!(cards[0]["representatives"].as_array().unwrap().len() >= 3);
    assert!(cards[0]["prototype_ppm"].as_str().unwrap().starts_with("UDY")); // "P6"

    let (status, body) = call(&app, "GET", "/sessions/s1/explanations?image=train/3", None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["data"]["contributions"].as_array().unwrap().len(), 10);

    let (status, body) = call(
        &app,
        "POST",
        "/sessions/s1/feedback",
        Some(json!({"kind": "mark_irrelevant", "concept": 1, "scope": {"kind": "class", "class": 0}})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    assert_eq!(body["data"]["author"], "human");
    assert_eq!(body["data"]["round"], 1);

    let (status, _) = call(&app, "POST", "/sessions/s1/rounds", None).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    wait_idle(&app, "s1").await;
    let (_, body) = call(&app, "GET", "/sessions/s1", None).await;
    assert_eq!(body["data"]["round"], 2);
    assert_eq!(body["data"]["memory"].as_array().unwrap().len(), 1);
    assert_eq!(body["data"]["epochs"], 4);
    let hash = body["data"]["checkpoint_hash"].clone();

    // A fresh server over the same root reloads the session from disk.
    let again = router(Arc::new(AppState::new(dir.path())));
    let (status, body) = call(&again, "GET", "/sessions/s1", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["data"]["checkpoint_hash"], hash);
    assert_eq!(body["data"]["feedback"].as_array().unwrap().len(), 1);
    assert!(dir.path().join("sessions/s1/feedback.jsonl").is_file());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn rounds_conflict_while_training() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir);
    create(&app, "busy", quick_config(30)).await;
    let (status, _) = call(&app, "POST", "/sessions/busy/rounds", None).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let (status, body) = call(&app, "POST", "/sessions/busy/rounds", None).await;
    assert_eq!(status, StatusCode::CONFLICT, "{body}");
    assert_eq!(body["ok"], false);
    assert_eq!(body["error"]["code"], "conflict");
    let (status, _) = call(
        &app,
        "POST",
        "/sessions/busy/feedback",
        Some(json!({"kind": "mark_relevant", "concept": 0, "class": 0})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    wait_idle(&app, "busy").await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn invalid_feedback_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir);
    create(&app, "fb", quick_config(1)).await;
    call(&app, "POST", "/sessions/fb/rounds", None).await;
    wait_idle(&app, "fb").await;

    let (status, body) = call(
        &app,
        "POST",
        "/sessions/fb/feedback",
        Some(json!({"kind": "mark_irrelevant", "concept": 99, "scope": {"kind": "global"}})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["field"], "concept");

    let (status, body) = call(
        &app,
        "POST",
        "/sessions/fb/feedback",
        Some(json!({"kind": "concept_label", "image": "test/0", "concept": 0, "desired": false})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["field"], "image");

    let (status, body) = call(&app, "POST", "/sessions/fb/feedback", Some(json!({"kind": "nonsense"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "bad_request");

    let (_, body) = call(&app, "GET", "/sessions/fb", None).await;
    assert!(body["data"]["feedback"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn unknown_things_are_404() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir);
    for uri in ["/sessions/nope", "/sessions/nope/concepts", "/sessions/..%2Fx", "/elsewhere"] {
        let (status, body) = call(&app, "GET", uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(body["ok"], false);
    }
    let (status, _) = call(&app, "POST", "/sessions", Some(json!({"dataset": "missing"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn metrics_cursor_pages_forward() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir);
    create(&app, "m", quick_config(3)).await;
    call(&app, "POST", "/sessions/m/rounds", None).await;
    let first = wait_idle(&app, "m").await;
    assert_eq!(first["data"]["next"], 3);

    let (_, page) = call(&app, "GET", "/sessions/m/metrics?since=2", None).await;
    let records = page["data"]["records"].as_array().unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0]["epoch"], 2);

    let (_, page) = call(&app, "GET", "/sessions/m/metrics?since=3", None).await;
    assert!(page["data"]["records"].as_array().unwrap().is_empty());
    assert_eq!(page["data"]["next"], 3);

    let (status, body) = call(&app, "GET", "/sessions/m/explanations?image=train/999", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND, "{body}");
}
