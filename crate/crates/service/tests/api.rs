use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use oneaudit_core::election::CardRecord;
use oneaudit_core::engine::{MethodConfig, SessionInputs};
use oneaudit_core::fixtures;
use oneaudit_service::{router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

const GOLDEN: &str = include_str!("../../core/tests/golden/transcript_alice_bob.jsonl");

fn inputs() -> SessionInputs {
    let f = fixtures::alice_bob(900, 100);
    SessionInputs {
        contest: f.contest,
        manifest: f.manifest,
        results: f.results,
        seed: "20230319".into(),
        method: MethodConfig::default(),
    }
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, body)
}

fn post(uri: &str, body: Value, revision: Option<u64>) -> Request<Body> {
    let mut b = Request::post(uri).header(header::CONTENT_TYPE, "application/json");
    if let Some(r) = revision {
        b = b.header(header::IF_MATCH, format!("\"{r}\""));
    }
    b.body(Body::from(body.to_string())).unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

async fn open(app: &Router) -> (String, u64) {
    let (status, body) = call(app, post("/sessions", json!(inputs()), None)).await;
    assert_eq!(status, StatusCode::CREATED);
    let v: Value = serde_json::from_slice(&body).unwrap();
    (
        v["id"].as_str().unwrap().to_owned(),
        v["revision"].as_u64().unwrap(),
    )
}

async fn draw(app: &Router, id: &str) -> (Value, u64) {
    let (status, body) = call(app, post(&format!("/sessions/{id}/draws"), json!({}), None)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let v: Value = serde_json::from_slice(&body).unwrap();
    let rev = v["revision"].as_u64().unwrap();
    (v["instruction"].clone(), rev)
}

#[tokio::test]
async fn healthz_answers() {
    let app = router(AppState::default());
    let (status, body) = call(&app, get("/healthz")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"ok");
}

#[tokio::test]
async fn api_session_reproduces_the_golden_transcript() {
    let app = router(AppState::default());
    let (id, mut revision) = open(&app).await;
    loop {
        let (status, body) = call(&app, get(&format!("/sessions/{id}"))).await;
        assert_eq!(status, StatusCode::OK);
        let summary: Value = serde_json::from_slice(&body).unwrap();
        if summary["status"] != "RUNNING" {
            assert_eq!(summary["status"], "CONFIRMED");
            break;
        }
        let (ins, rev) = draw(&app, &id).await;
        revision = rev;
        let cvr: Option<CardRecord> = serde_json::from_value(ins["cvr"].clone()).unwrap();
        let mvr = fixtures::alice_bob_mvr(
            900,
            100,
            ins["container_id"].as_str().unwrap(),
            ins["position"].as_u64().unwrap(),
            cvr.as_ref(),
        );
        let (status, body) = call(
            &app,
            post(
                &format!("/sessions/{id}/mvrs"),
                json!({"ordinal": ins["ordinal"], "mvr": mvr}),
                Some(revision),
            ),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
        revision = serde_json::from_slice::<Value>(&body).unwrap()["revision"]
            .as_u64()
            .unwrap();
    }
    let (status, body) = call(&app, get(&format!("/sessions/{id}/transcript"))).await;
    assert_eq!(status, StatusCode::OK);
    assert!(revision > 2);
    assert!(body == GOLDEN.as_bytes(), "transcript differs from golden");
}

#[tokio::test]
async fn stale_revision_is_a_conflict() {
    let app = router(AppState::default());
    let (id, opened) = open(&app).await;
    let (ins, _) = draw(&app, &id).await;
    let mvr = CardRecord::new("x").with_vote("mayor", Some("Alice"));
    let (status, body) = call(
        &app,
        post(
            &format!("/sessions/{id}/mvrs"),
            json!({"ordinal": ins["ordinal"], "mvr": mvr}),
            Some(opened),
        ),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["error"], "REVISION_CONFLICT");
}

#[tokio::test]
async fn missing_revision_is_refused() {
    let app = router(AppState::default());
    let (id, _) = open(&app).await;
    let (ins, _) = draw(&app, &id).await;
    let (status, _) = call(
        &app,
        post(
            &format!("/sessions/{id}/mvrs"),
            json!({"ordinal": ins["ordinal"], "mvr": CardRecord::new("x")}),
            None,
        ),
    )
    .await;
    assert_eq!(status, StatusCode::PRECONDITION_REQUIRED);
}

#[tokio::test]
async fn undrawn_ordinal_is_unprocessable() {
    let app = router(AppState::default());
    let (id, _) = open(&app).await;
    let (ins, revision) = draw(&app, &id).await;
    let other = if ins["ordinal"] == 1 { 2 } else { 1 };
    let (status, body) = call(
        &app,
        post(
            &format!("/sessions/{id}/mvrs"),
            json!({"ordinal": other, "mvr": CardRecord::new("x")}),
            Some(revision),
        ),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["error"], "UNKNOWN_ORDINAL");
    assert!(v["message"].as_str().is_some());
}

#[tokio::test]
async fn unknown_session_is_not_found() {
    let app = router(AppState::default());
    for req in [
        get("/sessions/nope"),
        get("/sessions/nope/transcript"),
        post("/sessions/nope/draws", json!({}), None),
    ] {
        let (status, body) = call(&app, req).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        let v: Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(v["error"], "UNKNOWN_SESSION");
    }
}

#[tokio::test]
async fn invalid_inputs_are_unprocessable() {
    let app = router(AppState::default());
    let mut bad = inputs();
    bad.results.totals.clear();
    let (status, body) = call(&app, post("/sessions", json!(bad), None)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert!(v["error"].as_str().is_some());
}
