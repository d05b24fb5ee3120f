//! HTTP routes.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use memekit::annotator::AnnotationRecord;
use memekit::matcher::{MatchError, Verdict};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use crate::store::{Store, StoreError};
use crate::survey::{create_survey, SourceDescriptor, SurveyError};
use crate::SCHEMA_VERSION;

pub struct AppState {
    pub store: Store,
    /// Required for survey creation, tallies and token issuing. Those routes
    /// refuse every request when unset.
    pub admin_token: Option<String>,
    /// Meme or template id → local path or URL.
    pub media: HashMap<String, String>,
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "schema_version": SCHEMA_VERSION,
            "error": { "code": self.code, "message": self.message },
        });
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        use StatusCode as S;
        let (status, code) = match &e {
            StoreError::UnknownSurvey(_) => (S::NOT_FOUND, "unknown_survey"),
            StoreError::UnknownEvaluator => (S::UNAUTHORIZED, "unknown_evaluator"),
            StoreError::DuplicateSurvey(_) => (S::CONFLICT, "duplicate_survey"),
            StoreError::Survey(SurveyError::UnknownItem(_)) => (S::NOT_FOUND, "unknown_item"),
            StoreError::Survey(_) => (S::UNPROCESSABLE_ENTITY, "invalid_selection"),
            StoreError::Match(MatchError::UnknownCandidate(_)) => (S::NOT_FOUND, "unknown_candidate"),
            StoreError::Match(MatchError::NotPending(_)) => (S::CONFLICT, "not_pending"),
            StoreError::Match(_) => (S::UNPROCESSABLE_ENTITY, "invalid_candidate"),
            StoreError::Log(_) | StoreError::Snapshot { .. } => (S::INTERNAL_SERVER_ERROR, "storage"),
        };
        if status == S::INTERNAL_SERVER_ERROR {
            log::error!("{e}");
        }
        ApiError::new(status, code, e.to_string())
    }
}

type ApiResult = Result<Response, ApiError>;

/// Wraps a payload with the schema version.
fn versioned<T: Serialize>(status: StatusCode, payload: T) -> Response {
    let mut v = serde_json::to_value(payload).expect("serializable payload");
    if let Value::Object(map) = &mut v {
        map.insert("schema_version".into(), json!(SCHEMA_VERSION));
    } else {
        v = json!({ "schema_version": SCHEMA_VERSION, "data": v });
    }
    (status, Json(v)).into_response()
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let value: Value = serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_json", e.to_string()))?;
    if let Some(v) = value.get("schema_version") {
        if v.as_u64() != Some(u64::from(SCHEMA_VERSION)) {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "schema_version",
                format!("unsupported schema_version {v}; this server speaks {SCHEMA_VERSION}"),
            ));
        }
    }
    serde_json::from_value(value).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", e.to_string()))
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers.get(header::AUTHORIZATION)?.to_str().ok()?.strip_prefix("Bearer ")
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

fn require_admin(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(expected) = &state.admin_token else {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "admin_disabled", "no admin token configured"));
    };
    match bearer(headers) {
        Some(t) if constant_time_eq(t.as_bytes(), expected.as_bytes()) => Ok(()),
        _ => Err(ApiError::new(StatusCode::UNAUTHORIZED, "admin_required", "admin token required")),
    }
}

/// Admin or any issued evaluator token; returns the reviewer's id.
fn require_reviewer(state: &AppState, headers: &HeaderMap) -> Result<String, ApiError> {
    if require_admin(state, headers).is_ok() {
        return Ok("admin".into());
    }
    match bearer(headers) {
        Some(t) if state.store.is_evaluator(t) => Ok(t.to_string()),
        _ => Err(ApiError::new(StatusCode::UNAUTHORIZED, "token_required", "reviewer token required")),
    }
}

#[derive(Deserialize)]
struct SourceInput {
    model: String,
    with_context: bool,
    annotations: Vec<AnnotationRecord>,
}

#[derive(Deserialize)]
struct CreateSurvey {
    memes: Vec<String>,
    sources: Vec<SourceInput>,
    #[serde(default)]
    seed: u64,
}

async fn create_survey_route(State(app): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult {
    require_admin(&app, &headers)?;
    let req: CreateSurvey = parse_body(&body)?;
    let sets: Vec<(SourceDescriptor, Vec<AnnotationRecord>)> = req
        .sources
        .into_iter()
        .map(|s| (SourceDescriptor { model: s.model, with_context: s.with_context }, s.annotations))
        .collect();
    let survey = create_survey(&req.memes, &sets, req.seed).map_err(StoreError::from)?;
    let items = survey.items.len();
    let id = app.store.add_survey(survey)?;
    Ok(versioned(StatusCode::CREATED, json!({ "survey_id": id, "items": items, "sources": sets.len() })))
}

#[derive(Deserialize)]
struct NextQuery {
    evaluator: Option<String>,
}

async fn next_route(State(app): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<NextQuery>) -> ApiResult {
    let evaluator = q.evaluator.ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "token_required", "evaluator token required"))?;
    Ok(versioned(StatusCode::OK, app.store.next_item(&id, &evaluator)?))
}

#[derive(Deserialize)]
struct VoteInput {
    evaluator: String,
    item_id: String,
    selected: Vec<String>,
}

async fn vote_route(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let v: VoteInput = parse_body(&body)?;
    let stored = app.store.record_vote(&v.evaluator, &v.item_id, v.selected)?;
    Ok(versioned(
        StatusCode::OK,
        json!({ "status": "stored", "item_id": stored.item_id, "selected": stored.selected, "timestamp": stored.timestamp }),
    ))
}

async fn tally_route(State(app): State<Arc<AppState>>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    require_admin(&app, &headers)?;
    Ok(versioned(StatusCode::OK, app.store.tally(&id)?))
}

#[derive(Deserialize)]
struct IssueInput {
    #[serde(default)]
    label: String,
}

async fn issue_route(State(app): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult {
    require_admin(&app, &headers)?;
    let req: IssueInput = if body.is_empty() { IssueInput { label: String::new() } } else { parse_body(&body)? };
    let token = app.store.issue_evaluator(&req.label)?;
    Ok(versioned(StatusCode::CREATED, json!({ "token": token })))
}

async fn queue_route(State(app): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult {
    require_reviewer(&app, &headers)?;
    let pending = app.store.pending_matches();
    let entries: Vec<Value> = pending
        .iter()
        .map(|c| {
            let mut v = serde_json::to_value(c).expect("serializable candidate");
            v["instance_media"] = json!(format!("/media/{}", c.instance_id));
            v["template_media"] = json!(format!("/media/{}", c.template_id));
            v
        })
        .collect();
    Ok(versioned(StatusCode::OK, json!({ "pending": entries.len(), "candidates": entries })))
}

#[derive(Deserialize)]
struct VerdictInput {
    verdict: Verdict,
}

async fn verdict_route(
    State(app): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult {
    let reviewer = require_reviewer(&app, &headers)?;
    let req: VerdictInput = parse_body(&body)?;
    Ok(versioned(StatusCode::OK, app.store.match_verdict(&id, req.verdict, &reviewer)?))
}

#[derive(Deserialize)]
struct ExportQuery {
    #[serde(default)]
    only_verified: bool,
}

async fn export_route(State(app): State<Arc<AppState>>, headers: HeaderMap, Query(q): Query<ExportQuery>) -> ApiResult {
    require_admin(&app, &headers)?;
    Ok(versioned(StatusCode::OK, json!({ "candidates": app.store.export_matches(q.only_verified) })))
}

fn content_type(path: &str) -> &'static str {
    match path.rsplit('.').next().map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

async fn media_route(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let reference = app
        .media
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_media", format!("no image for {id}")))?;
    if reference.starts_with("http://") || reference.starts_with("https://") {
        return Ok(Redirect::temporary(reference).into_response());
    }
    let bytes = tokio::fs::read(reference)
        .await
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "missing_media", format!("{id}: {e}")))?;
    Ok(([(header::CONTENT_TYPE, content_type(reference))], bytes).into_response())
}

async fn health_route() -> Response {
    versioned(StatusCode::OK, json!({ "status": "ok" }))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

pub fn router(state: AppState) -> Router {
    let ui_dir = state.ui_dir.clone();
    let app = Router::new()
        .route("/health", get(health_route))
        .route("/surveys", post(create_survey_route))
        .route("/surveys/{id}/next", get(next_route))
        .route("/surveys/{id}/tally", get(tally_route))
        .route("/votes", post(vote_route))
        .route("/evaluators", post(issue_route))
        .route("/matches/queue", get(queue_route))
        .route("/matches/export", get(export_route))
        .route("/matches/{id}/verdict", post(verdict_route))
        .route("/media/{id}", get(media_route))
        .with_state(Arc::new(state));
    match ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => app.fallback(not_found),
    }
}
