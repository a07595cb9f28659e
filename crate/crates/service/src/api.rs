//! HTTP routes.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::Semaphore;
use tracing::error;

use crate::error::ServiceError;
use crate::heatmap::{HeatClass, HeatmapSpec};
use crate::service::{ExportFilter, FeedbackRequest, JobStatus, Service};
use crate::store::{JobState, Verdict};

/// Largest accepted request body.
pub const MAX_UPLOAD_BYTES: usize = 2 << 30;

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<Service>,
    workers: Arc<Semaphore>,
}

#[derive(Clone, Debug)]
struct User(Option<String>);

impl AppState {
    pub fn new(service: Arc<Service>) -> Self {
        let workers = Arc::new(Semaphore::new(service.config().workers.max(1)));
        Self { service, workers }
    }

    /// Queues a job on the bounded worker pool.
    pub fn schedule(&self, id: String) -> tokio::task::JoinHandle<()> {
        let svc = self.service.clone();
        let workers = self.workers.clone();
        tokio::spawn(async move {
            let Ok(_permit) = workers.acquire_owned().await else {
                return;
            };
            let job = id.clone();
            match tokio::task::spawn_blocking(move || svc.process(&job)).await {
                Ok(Ok(())) => {}
                Ok(Err(e)) => error!(slide = %id, error = %e, "job error"),
                Err(e) => error!(slide = %id, error = %e, "job panicked"),
            }
        })
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn authenticate(State(s): State<AppState>, mut req: Request, next: Next) -> Response {
    let token = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim);
    match s.service.authenticate(token) {
        Ok(user) => {
            req.extensions_mut().insert(User(user));
            next.run(req).await
        }
        Err(e) => e.into_response(),
    }
}

pub fn router(state: AppState) -> Router {
    let protected = Router::new()
        .route("/api/slides", post(submit).get(list))
        .route("/api/slides/{id}", get(status))
        .route("/api/slides/{id}/heatmap", get(heatmap))
        .route("/api/slides/{id}/feedback", post(post_feedback).get(list_feedback))
        .route("/api/export.csv", get(export))
        .route_layer(middleware::from_fn_with_state(state.clone(), authenticate));
    Router::new()
        .route("/api/healthz", get(healthz))
        .merge(protected)
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

async fn healthz(State(s): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "model_version": s.service.model_version() }))
}

#[derive(Deserialize)]
struct SubmitIds {
    ids: Vec<String>,
}

/// Multipart batches upload files; a JSON body `{"ids": [...]}`
/// re-evaluates known slides. Each item succeeds or fails on its own.
async fn submit(State(s): State<AppState>, req: Request) -> Result<Response, ServiceError> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let mut out: Vec<JobStatus> = Vec::new();
    if is_multipart {
        let mut form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ServiceError::BadRequest(e.body_text()))?;
        while let Some(field) = form
            .next_field()
            .await
            .map_err(|e| ServiceError::BadRequest(e.body_text()))?
        {
            let Some(name) = field.file_name().map(str::to_string) else {
                continue;
            };
            let bytes = field
                .bytes()
                .await
                .map_err(|e| ServiceError::BadRequest(e.body_text()))?;
            let svc = s.service.clone();
            let (status, run) = blocking(move || svc.submit_upload(&name, &bytes)).await?;
            if run {
                s.schedule(status.slide_id.clone());
            }
            out.push(status);
        }
    } else {
        let Json(body) = Json::<SubmitIds>::from_request(req, &())
            .await
            .map_err(|e| ServiceError::BadRequest(e.body_text()))?;
        for id in body.ids {
            let svc = s.service.clone();
            let lookup = id.clone();
            match blocking(move || svc.submit_id(&lookup)).await {
                Ok((status, run)) => {
                    if run {
                        s.schedule(status.slide_id.clone());
                    }
                    out.push(status);
                }
                Err(e @ ServiceError::UnknownSlide(_)) => out.push(JobStatus {
                    slide_id: id,
                    filename: String::new(),
                    state: JobState::Failed,
                    error: Some(e.to_string()),
                    cached: false,
                    result: None,
                }),
                Err(e) => return Err(e),
            }
        }
    }
    Ok((StatusCode::ACCEPTED, Json(out)).into_response())
}

async fn list(State(s): State<AppState>) -> Result<Json<Vec<JobStatus>>, ServiceError> {
    let svc = s.service.clone();
    Ok(Json(blocking(move || svc.list()).await?))
}

async fn status(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<JobStatus>, ServiceError> {
    let svc = s.service.clone();
    Ok(Json(blocking(move || svc.status(&id)).await?))
}

async fn heatmap(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Response, ServiceError> {
    let class = match q.get("class").map(String::as_str) {
        None | Some("") => HeatClass::Argmax,
        Some(c) => HeatClass::parse(c)
            .ok_or_else(|| ServiceError::InvalidParameter(format!("class `{c}` is not NNeo, LG, HG or argmax")))?,
    };
    let opacity = match q.get("opacity").map(String::as_str) {
        None | Some("") => 0.5,
        Some(o) => o
            .parse::<f64>()
            .ok()
            .filter(|v| !v.is_nan())
            .ok_or_else(|| ServiceError::InvalidParameter(format!("opacity `{o}` is not a number")))?,
    };
    let spec = HeatmapSpec::new(class, opacity);
    let svc = s.service.clone();
    let png = blocking(move || svc.heatmap_png(&id, spec)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], Body::from(png)).into_response())
}

async fn post_feedback(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Extension(User(user)): Extension<User>,
    body: Result<Json<FeedbackRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<Response, ServiceError> {
    let Json(req) = body.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    let svc = s.service.clone();
    let fb = blocking(move || svc.add_feedback(&id, req, user)).await?;
    Ok((StatusCode::CREATED, Json(fb)).into_response())
}

async fn list_feedback(
    State(s): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ServiceError> {
    let svc = s.service.clone();
    let list = blocking(move || svc.feedback(&id)).await?;
    Ok(Json(list).into_response())
}

async fn export(
    State(s): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Response, ServiceError> {
    let mut filter = ExportFilter::default();
    if let Some(v) = q.get("state").filter(|v| !v.is_empty()) {
        filter.state = Some(
            serde_json::from_value(json!(v))
                .map_err(|_| ServiceError::InvalidParameter(format!("state `{v}`")))?,
        );
    }
    if let Some(v) = q.get("verdict").filter(|v| !v.is_empty()) {
        filter.verdict =
            Some(Verdict::parse(v).ok_or_else(|| ServiceError::InvalidVerdict(v.clone()))?);
    }
    let svc = s.service.clone();
    let csv = blocking(move || svc.export_csv(&filter)).await?;
    Ok((
        [
            (header::CONTENT_TYPE, "text/csv; charset=utf-8"),
            (header::CONTENT_DISPOSITION, "attachment; filename=\"export.csv\""),
        ],
        csv,
    )
        .into_response())
}
