//! HTTP binding under `/api/v1`.

use std::future::Future;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;

use crate::service::{error_json, ReviewService, ServiceError};

fn status(e: &ServiceError) -> StatusCode {
    match e {
        ServiceError::NotFound { .. } => StatusCode::NOT_FOUND,
        ServiceError::Invalid {
            code: "invalid_body", ..
        } => StatusCode::BAD_REQUEST,
        ServiceError::Invalid { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        ServiceError::DataDir(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn json(status: StatusCode, body: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn respond(result: Result<Vec<u8>, ServiceError>, ok: StatusCode) -> Response {
    match result {
        Ok(body) => json(ok, body),
        Err(e) => json(status(&e), error_json(&e)),
    }
}

/// Runs blocking file work off the async executor.
async fn blocking<F>(service: Arc<ReviewService>, ok: StatusCode, f: F) -> Response
where
    F: FnOnce(&ReviewService) -> Result<Vec<u8>, ServiceError> + Send + 'static,
{
    let result = tokio::task::spawn_blocking(move || f(&service))
        .await
        .unwrap_or_else(|e| Err(ServiceError::Internal(e.to_string())));
    respond(result, ok)
}

async fn list_sessions(State(s): State<Arc<ReviewService>>) -> Response {
    blocking(s, StatusCode::OK, |s| s.list_sessions_json()).await
}

async fn timeline(State(s): State<Arc<ReviewService>>, Path(id): Path<String>) -> Response {
    blocking(s, StatusCode::OK, move |s| s.timeline_json(&id)).await
}

async fn metrics(State(s): State<Arc<ReviewService>>, Path(id): Path<String>) -> Response {
    blocking(s, StatusCode::OK, move |s| s.metrics_json(&id)).await
}

async fn highlight_frames(State(s): State<Arc<ReviewService>>, Path((id, clip)): Path<(String, String)>) -> Response {
    blocking(s, StatusCode::OK, move |s| s.highlight_frames_json(&id, &clip)).await
}

async fn post_annotation(State(s): State<Arc<ReviewService>>, Path(id): Path<String>, body: Bytes) -> Response {
    blocking(s, StatusCode::CREATED, move |s| s.post_annotation_json(&id, &body)).await
}

async fn progress(State(s): State<Arc<ReviewService>>, Path(subject): Path<String>) -> Response {
    blocking(s, StatusCode::OK, move |s| {
        s.progress_json(&subject).map(|b| b.as_ref().clone())
    })
    .await
}

async fn not_found(uri: Uri) -> Response {
    let e = ServiceError::NotFound {
        what: "route",
        id: uri.path().to_string(),
    };
    json(StatusCode::NOT_FOUND, error_json(&e))
}

async fn method_not_allowed() -> Response {
    let e = ServiceError::Invalid {
        code: "method_not_allowed",
        message: "method not allowed on this route".into(),
    };
    json(StatusCode::METHOD_NOT_ALLOWED, error_json(&e))
}

pub fn router(service: Arc<ReviewService>) -> Router {
    let api = Router::new()
        .route("/sessions", get(list_sessions))
        .route("/sessions/{id}/timeline", get(timeline))
        .route("/sessions/{id}/metrics", get(metrics))
        .route("/sessions/{id}/highlights/{clip}/frames", get(highlight_frames))
        .route("/sessions/{id}/annotations", post(post_annotation))
        .route("/subjects/{id}/progress", get(progress));
    Router::new()
        .nest("/api/v1", api)
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .with_state(service)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: Arc<ReviewService>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service))
        .with_graceful_shutdown(shutdown)
        .await
}
