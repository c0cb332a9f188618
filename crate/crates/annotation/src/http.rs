use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use incoforge_core::forge::Instance;

use crate::error::AnnotationError;
use crate::service::{AnnotationService, SubmitOutcome, SubmitRequest};
use crate::state::Worker;
use crate::types::{candidates_for, AgreementPolicy, Role, Selection};

pub struct ApiError(pub AnnotationError);

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        ApiError(e)
    }
}

pub fn status_of(e: &AnnotationError) -> StatusCode {
    use AnnotationError::*;
    match e {
        Unauthorized => StatusCode::UNAUTHORIZED,
        Forbidden(_) => StatusCode::FORBIDDEN,
        UnknownWorker(_) | UnknownCandidate(_) => StatusCode::NOT_FOUND,
        DuplicateJudgment { .. } | IdempotencyConflict(_) | Closed | Full(_) | NotReady(_) | Incomplete(_) => {
            StatusCode::CONFLICT
        }
        Json(_) | Invalid(_) => StatusCode::BAD_REQUEST,
        Core(_) | Io(_) | Journal { .. } => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.0.code(), "detail": self.0.to_string() });
        if let AnnotationError::Incomplete(d) = &self.0 {
            body["deficient"] = d.iter().map(|(id, n)| json!({ "candidate": id, "judgments": n })).collect();
        }
        (status_of(&self.0), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Svc = Arc<AnnotationService>;

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers.get(header::AUTHORIZATION)?.to_str().ok()?.strip_prefix("Bearer ").map(str::trim)
}

fn require_admin(svc: &AnnotationService, headers: &HeaderMap) -> ApiResult<()> {
    match bearer(headers) {
        Some(t) if svc.is_admin(t) => Ok(()),
        Some(t) if svc.authenticate(t).is_ok() => Err(AnnotationError::Forbidden("admin token required".into()).into()),
        _ => Err(AnnotationError::Unauthorized.into()),
    }
}

fn require_worker(svc: &AnnotationService, headers: &HeaderMap) -> ApiResult<Worker> {
    let t = bearer(headers).ok_or(AnnotationError::Unauthorized)?;
    Ok(svc.authenticate(t)?)
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    let src: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(src).map_err(|e| AnnotationError::Invalid(e.to_string()).into())
}

async fn blocking<T, F>(svc: Svc, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&AnnotationService) -> Result<T, AnnotationError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| AnnotationError::Invalid(format!("worker task failed: {e}")))?
        .map_err(ApiError)
}

#[derive(Deserialize)]
struct CreateWorker {
    role: Role,
}

async fn create_worker(State(svc): State<Svc>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    require_admin(&svc, &headers)?;
    let req: CreateWorker = parse(&body)?;
    let (w, token) = blocking(svc, move |s| s.create_worker(req.role)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "worker_id": w.id, "token": token, "role": w.role })))
        .into_response())
}

#[derive(Deserialize)]
struct EnqueueBody {
    instances: Vec<Value>,
    #[serde(default)]
    selection: Selection,
}

async fn enqueue(State(svc): State<Svc>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    require_admin(&svc, &headers)?;
    let req: EnqueueBody = parse(&body)?;
    let mut items = Vec::new();
    for (i, v) in req.instances.into_iter().enumerate() {
        let id = v.get("id").and_then(Value::as_str).map(str::to_string);
        match serde_json::from_value::<Instance>(v).map_err(|e| e.to_string()) {
            Ok(inst) => match candidates_for(&inst, req.selection) {
                Ok(cs) => items.extend(cs.into_iter().map(|c| (i, Ok(c)))),
                Err(e) => items.push((i, Err((id, e.to_string())))),
            },
            Err(e) => items.push((i, Err((id, e)))),
        }
    }
    let report = blocking(svc, move |s| s.enqueue_results(items)).await?;
    Ok(Json(report).into_response())
}

async fn next_task(State(svc): State<Svc>, headers: HeaderMap) -> ApiResult<Response> {
    let w = require_worker(&svc, &headers)?;
    let task = svc.next_task(&w.id)?;
    let progress = svc.worker_progress(&w.id)?;
    Ok(Json(json!({ "task": task, "progress": progress })).into_response())
}

async fn submit(State(svc): State<Svc>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let w = require_worker(&svc, &headers)?;
    let req: SubmitRequest = parse(&body)?;
    let outcome = blocking(svc, move |s| s.submit(&w.id, req)).await?;
    let status = match outcome {
        SubmitOutcome::Accepted { .. } => StatusCode::CREATED,
        SubmitOutcome::Duplicate { .. } => StatusCode::OK,
    };
    Ok((status, Json(outcome)).into_response())
}

async fn progress(State(svc): State<Svc>, headers: HeaderMap) -> ApiResult<Response> {
    if let Some(t) = bearer(&headers) {
        if svc.is_admin(t) {
            return Ok(Json(svc.progress()).into_response());
        }
    }
    let w = require_worker(&svc, &headers)?;
    Ok(Json(svc.worker_progress(&w.id)?).into_response())
}

#[derive(Deserialize, Default)]
struct FilterBody {
    n_judges: Option<usize>,
    required_agree: Option<usize>,
}

async fn filter(State(svc): State<Svc>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    require_admin(&svc, &headers)?;
    let req: FilterBody = parse(&body)?;
    let d = svc.config().policy;
    let policy = AgreementPolicy::new(req.n_judges.unwrap_or(d.n_judges), req.required_agree.unwrap_or(d.required_agree))?;
    let out = blocking(svc, move |s| s.run_filter(Some(policy))).await?;
    Ok(Json(json!({
        "policy": out.policy,
        "kept": out.kept.len(),
        "dropped": out.dropped(),
        "retention": out.retention(),
        "kept_ids": out.kept,
        "tallies": out.tallies,
    }))
    .into_response())
}

async fn export(State(svc): State<Svc>, headers: HeaderMap) -> ApiResult<Response> {
    require_admin(&svc, &headers)?;
    let rows = svc.export()?;
    let mut body = String::new();
    for r in rows {
        body.push_str(&serde_json::to_string(&r).map_err(AnnotationError::from)?);
        body.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn baseline(State(svc): State<Svc>, headers: HeaderMap) -> ApiResult<Response> {
    require_admin(&svc, &headers)?;
    Ok(Json(svc.human_baseline()?).into_response())
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn not_found() -> ApiError {
    ApiError(AnnotationError::Invalid("no such endpoint".into()))
}

pub fn router(svc: Arc<AnnotationService>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/workers", post(create_worker))
        .route("/api/candidates", post(enqueue))
        .route("/api/tasks/next", get(next_task))
        .route("/api/judgments", post(submit))
        .route("/api/progress", get(progress))
        .route("/api/filter", post(filter))
        .route("/api/export", get(export))
        .route("/api/baseline", get(baseline))
        .route("/api/{*rest}", axum::routing::any(not_found))
        .with_state(svc);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
