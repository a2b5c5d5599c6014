//! HTTP facade over audit sessions.
//!
//! Mutating requests carry the caller's view of the session revision in an
//! `If-Match` header; a stale revision is rejected with 409 so two entry
//! stations cannot both record the same card.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use oneaudit_core::election::CardRecord;
use oneaudit_core::engine::{AuditSession, SessionInputs};
use oneaudit_core::AuditError;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Default)]
struct Sessions {
    next_id: u64,
    open: BTreeMap<String, AuditSession>,
}

#[derive(Clone, Default)]
pub struct AppState {
    inner: Arc<Mutex<Sessions>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionHandle {
    pub id: String,
    pub revision: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MvrRequest {
    pub ordinal: u64,
    pub mvr: CardRecord,
}

#[derive(Debug)]
pub enum ApiError {
    UnknownSession(String),
    Conflict { expected: u64, current: u64 },
    MissingRevision,
    BadRevision(String),
    Domain(AuditError),
}

impl From<AuditError> for ApiError {
    fn from(e: AuditError) -> Self {
        ApiError::Domain(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::UnknownSession(id) => (
                StatusCode::NOT_FOUND,
                json!({"error": "UNKNOWN_SESSION", "message": format!("no session {id}")}),
            ),
            ApiError::Conflict { expected, current } => (
                StatusCode::CONFLICT,
                json!({
                    "error": "REVISION_CONFLICT",
                    "message": format!("expected revision {expected}, session is at {current}"),
                    "revision": current,
                }),
            ),
            ApiError::MissingRevision => (
                StatusCode::PRECONDITION_REQUIRED,
                json!({"error": "REVISION_REQUIRED", "message": "If-Match header with the session revision is required"}),
            ),
            ApiError::BadRevision(raw) => (
                StatusCode::BAD_REQUEST,
                json!({"error": "BAD_REVISION", "message": format!("not a revision: {raw:?}")}),
            ),
            ApiError::Domain(e) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                serde_json::to_value(e.to_json()).unwrap_or_default(),
            ),
        };
        (status, Json(body)).into_response()
    }
}

/// Revision from `If-Match`, tolerating the quoted entity-tag form.
fn expected_revision(headers: &HeaderMap) -> Result<Option<u64>, ApiError> {
    let Some(raw) = headers.get(header::IF_MATCH) else {
        return Ok(None);
    };
    let text = raw.to_str().unwrap_or_default();
    let trimmed = text.trim().trim_start_matches("W/").trim_matches('"');
    trimmed
        .parse()
        .map(Some)
        .map_err(|_| ApiError::BadRevision(text.to_owned()))
}

fn check_revision(session: &AuditSession, expected: Option<u64>) -> Result<(), ApiError> {
    match expected {
        Some(e) if e != session.revision() => Err(ApiError::Conflict {
            expected: e,
            current: session.revision(),
        }),
        _ => Ok(()),
    }
}

fn etag(revision: u64) -> [(header::HeaderName, String); 1] {
    [(header::ETAG, format!("\"{revision}\""))]
}

impl AppState {
    fn with_session<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut AuditSession) -> Result<T, ApiError>,
    ) -> Result<T, ApiError> {
        let mut guard = self.inner.lock().expect("session table poisoned");
        let session = guard
            .open
            .get_mut(id)
            .ok_or_else(|| ApiError::UnknownSession(id.to_owned()))?;
        f(session)
    }
}

async fn healthz() -> &'static str {
    "ok"
}

async fn open_session(
    State(state): State<AppState>,
    Json(inputs): Json<SessionInputs>,
) -> Result<Response, ApiError> {
    let session = AuditSession::open(inputs)?;
    let mut guard = state.inner.lock().expect("session table poisoned");
    guard.next_id += 1;
    let handle = SessionHandle {
        id: format!("s{}", guard.next_id),
        revision: session.revision(),
    };
    guard.open.insert(handle.id.clone(), session);
    Ok((StatusCode::CREATED, etag(handle.revision), Json(handle)).into_response())
}

async fn get_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    state.with_session(&id, |s| {
        let summary = s.summary();
        Ok((etag(summary.revision), Json(summary)).into_response())
    })
}

async fn draw(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let expected = expected_revision(&headers)?;
    state.with_session(&id, |s| {
        check_revision(s, expected)?;
        let instruction = s.draw_next()?;
        let revision = s.revision();
        Ok((
            etag(revision),
            Json(json!({"revision": revision, "instruction": instruction})),
        )
            .into_response())
    })
}

async fn record(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(req): Json<MvrRequest>,
) -> Result<Response, ApiError> {
    let expected = expected_revision(&headers)?.ok_or(ApiError::MissingRevision)?;
    state.with_session(&id, |s| {
        check_revision(s, Some(expected))?;
        let updates = s.record_mvr(req.ordinal, req.mvr)?;
        let revision = s.revision();
        Ok((
            etag(revision),
            Json(json!({"revision": revision, "status": s.status, "updates": updates})),
        )
            .into_response())
    })
}

async fn transcript(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    state.with_session(&id, |s| {
        Ok((
            [(header::CONTENT_TYPE, "application/x-ndjson".to_owned())],
            s.transcript().render(),
        )
            .into_response())
    })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(open_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/draws", post(draw))
        .route("/sessions/{id}/mvrs", post(record))
        .route("/sessions/{id}/transcript", get(transcript))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(AppState::default()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
