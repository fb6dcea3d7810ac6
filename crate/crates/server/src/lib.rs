//! JSON-over-HTTP front end for the pipeline service, versioned under `/v1`.
//!
//! | method | path                                        |
//! |--------|---------------------------------------------|
//! | POST   | `/v1/books`                                 |
//! | GET    | `/v1/books`                                 |
//! | GET    | `/v1/books/{id}`                            |
//! | GET    | `/v1/books/{id}/review`                     |
//! | POST   | `/v1/books/{id}/review/{asset}/verdict`     |
//! | POST   | `/v1/books/{id}/review/complete`            |
//! | GET    | `/v1/books/{id}/bundle`                     |
//! | GET    | `/v1/books/{id}/manifest`                   |
//! | GET    | `/v1/books/{id}/assets/{asset}/frontal`     |
//! | POST   | `/v1/books/{id}/resubmit`                   |
//!
//! Errors are `{"error": {"kind": ..., "message": ...}}`.

use std::future::Future;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode, header};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::Deserialize;
use serde_json::json;
use storyforge_core::gate::ReviewAction;
use storyforge_core::pipeline::{PipelineError, PipelineService};

/// How often awaiting reviews are checked against the timeout.
pub const REVIEW_SWEEP_INTERVAL: Duration = Duration::from_secs(30);

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: String,
    message: String,
    state: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind: kind.to_owned(),
            message: message.into(),
            state: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "InvalidInput", message)
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::NotFound(_) | PipelineError::UnknownAsset(_) => StatusCode::NOT_FOUND,
            PipelineError::WrongState { .. }
            | PipelineError::VerdictConflict { .. }
            | PipelineError::NotSuspicious(_) => StatusCode::CONFLICT,
            PipelineError::EmptyStory => StatusCode::BAD_REQUEST,
            PipelineError::OcrUnavailable => StatusCode::NOT_IMPLEMENTED,
            PipelineError::OcrFailed(_) => StatusCode::BAD_GATEWAY,
            PipelineError::Storage(_) | PipelineError::Config(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        let state = match &e {
            PipelineError::WrongState { state, .. } => Some(state.as_str().to_owned()),
            _ => None,
        };
        Self {
            status,
            kind: e.kind().to_owned(),
            message: e.to_string(),
            state,
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut error = json!({ "kind": self.kind, "message": self.message });
        if let Some(state) = self.state {
            error["state"] = json!(state);
        }
        (self.status, Json(json!({ "error": error }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs a service call off the async executor.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, PipelineError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBook {
    title: String,
    #[serde(default, alias = "body")]
    text: Option<String>,
    /// Photographed page for the OCR hook.
    #[serde(default)]
    image_base64: Option<String>,
    #[serde(default)]
    language: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerdictBody {
    action: String,
    #[serde(default)]
    actor: Option<String>,
}

pub fn router(service: PipelineService) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/v1/books", post(create_book).get(list_books))
        .route("/v1/books/{id}", get(get_book))
        .route("/v1/books/{id}/review", get(review_items))
        .route("/v1/books/{id}/review/complete", post(complete_review))
        .route("/v1/books/{id}/review/{asset}/verdict", post(post_verdict))
        .route("/v1/books/{id}/bundle", get(bundle))
        .route("/v1/books/{id}/manifest", get(manifest))
        .route("/v1/books/{id}/assets/{asset}/frontal", get(frontal))
        .route("/v1/books/{id}/resubmit", post(resubmit))
        .with_state(service)
}

async fn create_book(
    State(svc): State<PipelineService>,
    body: Result<Json<CreateBook>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body?;
    let language = req.language.unwrap_or_else(|| "en".to_owned());
    let view = match (req.text, req.image_base64) {
        (Some(text), None) => blocking(move || svc.create_book(&req.title, &text, &language)).await?,
        (None, Some(image)) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(image.trim())
                .map_err(|e| ApiError::bad_request(format!("image_base64: {e}")))?;
            blocking(move || svc.create_book_from_image(&req.title, &bytes, &language)).await?
        }
        _ => {
            return Err(ApiError::bad_request(
                "exactly one of `text` or `image_base64` is required",
            ));
        }
    };
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn list_books(State(svc): State<PipelineService>) -> ApiResult<Response> {
    let books = blocking(move || Ok(svc.list_books())).await?;
    Ok(Json(books).into_response())
}

async fn get_book(State(svc): State<PipelineService>, Path(id): Path<String>) -> ApiResult<Response> {
    let view = blocking(move || svc.get_status(&id)).await?;
    Ok(Json(view).into_response())
}

async fn review_items(
    State(svc): State<PipelineService>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let (items, view) = blocking(move || Ok((svc.review_items(&id)?, svc.get_status(&id)?))).await?;
    Ok(Json(json!({
        "book_id": view.book_id,
        "state": view.state,
        "items": items,
    }))
    .into_response())
}

async fn post_verdict(
    State(svc): State<PipelineService>,
    Path((id, asset)): Path<(String, String)>,
    body: Result<Json<VerdictBody>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body?;
    let action: ReviewAction = req.action.parse().map_err(ApiError::bad_request)?;
    let actor = req.actor.unwrap_or_else(|| "reviewer".to_owned());
    let item = blocking(move || svc.post_verdict(&id, &asset, action, &actor)).await?;
    Ok(Json(item).into_response())
}

async fn complete_review(
    State(svc): State<PipelineService>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let view = blocking(move || svc.complete_review(&id)).await?;
    Ok(Json(view).into_response())
}

fn etag(sha256: &str) -> String {
    format!("\"sha256-{sha256}\"")
}

async fn bundle(
    State(svc): State<PipelineService>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let name = id.clone();
    let bundle = blocking(move || svc.download_bundle(&id)).await?;
    let tag = etag(&bundle.sha256);
    let mut out = HeaderMap::new();
    let value = |s: &str| HeaderValue::from_str(s).expect("header value is ascii");
    out.insert(header::ETAG, value(&tag));
    out.insert("x-content-sha256", value(&bundle.sha256));
    out.insert(header::CACHE_CONTROL, HeaderValue::from_static("immutable"));
    if headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == tag))
    {
        return Ok((StatusCode::NOT_MODIFIED, out).into_response());
    }
    out.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/zip"));
    out.insert(
        header::CONTENT_DISPOSITION,
        value(&format!("attachment; filename=\"{name}.zip\"")),
    );
    Ok((out, bundle.bytes).into_response())
}

async fn manifest(State(svc): State<PipelineService>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = blocking(move || svc.manifest_json(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn frontal(
    State(svc): State<PipelineService>,
    Path((id, asset)): Path<(String, String)>,
) -> ApiResult<Response> {
    let png = blocking(move || svc.frontal_view(&id, &asset)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn resubmit(State(svc): State<PipelineService>, Path(id): Path<String>) -> ApiResult<Response> {
    let view = blocking(move || svc.resubmit(&id)).await?;
    Ok(Json(view).into_response())
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(e) => {
                log::error!("cannot listen for SIGTERM: {e}");
                std::future::pending::<()>().await;
            }
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// Serves the API until `shutdown` resolves, then stops the pipeline
/// runners. Books left mid-run are resumed on startup.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: PipelineService,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let resumed = {
        let svc = service.clone();
        tokio::task::spawn_blocking(move || svc.resume_all())
            .await
            .map_err(std::io::Error::other)?
    };
    if !resumed.is_empty() {
        log::info!("resumed {} book(s)", resumed.len());
    }
    let sweeper = {
        let svc = service.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(REVIEW_SWEEP_INTERVAL);
            loop {
                tick.tick().await;
                let svc = svc.clone();
                let expired =
                    tokio::task::spawn_blocking(move || svc.expire_reviews(chrono::Utc::now())).await;
                if let Ok(ids) = expired {
                    for id in ids {
                        log::info!("review of {id} timed out; completed with default verdicts");
                    }
                }
            }
        })
    };
    if let Ok(addr) = listener.local_addr() {
        log::info!("listening on http://{addr}");
    }
    let result = axum::serve(listener, router(service.clone()))
        .with_graceful_shutdown(shutdown)
        .await;
    sweeper.abort();
    log::info!("stopping pipeline runners");
    tokio::task::spawn_blocking(move || service.shutdown())
        .await
        .map_err(std::io::Error::other)?;
    result
}
