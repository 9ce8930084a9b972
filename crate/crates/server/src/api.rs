use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gestureforge_core::gesture::{LabeledFrame, Regime, TrainSpec};
use gestureforge_core::landmark::{normalize_landmarks, FrameLandmarks, FrameRecord, NormalizationConfig};
use gestureforge_core::metrics::evaluate;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

use crate::error::ApiError;
use crate::store::NewSample;
use crate::training::HeadOptions;
use crate::{stream, AppState};

pub const TOKEN_HEADER: &str = "x-gestureforge-token";

type Shared = State<Arc<AppState>>;

pub fn router(state: Arc<AppState>) -> Router {
    let protected = Router::new()
        .route("/projects", post(create_project).get(list_projects))
        .route("/projects/{id}", get(get_project))
        .route("/projects/{id}/classes", post(add_class))
        .route("/projects/{id}/samples", post(upload_samples))
        .route("/projects/{id}/jobs", post(start_job))
        .route("/jobs", get(list_jobs))
        .route("/jobs/{id}", get(get_job))
        .route("/models", get(list_models))
        .route("/models/{id}", get(get_model))
        .route("/models/{id}/file", get(download_model))
        .route("/models/{id}/eval", post(eval_model))
        .route("/stream/{model_id}", get(stream::handler))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    let api = Router::new().route("/health", get(health)).merge(protected);
    Router::new().nest("/api/v1", api).with_state(state)
}

#[derive(Deserialize)]
struct TokenQuery {
    token: Option<String>,
}

async fn require_token(
    State(state): Shared,
    Query(q): Query<TokenQuery>,
    headers: HeaderMap,
    req: Request,
    next: Next,
) -> Response {
    let Some(expected) = state.token.as_deref() else {
        return next.run(req).await;
    };
    let bearer = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    let custom = headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok());
    let presented = bearer.or(custom).or(q.token.as_deref());
    if presented == Some(expected) {
        next.run(req).await
    } else {
        ApiError::unauthorized().into_response()
    }
}

/// Parses a JSON body, reporting malformed input as a 400.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("invalid_json", e.to_string()))
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

#[derive(Deserialize)]
struct CreateProject {
    name: String,
    #[serde(default)]
    classes: Vec<String>,
}

async fn create_project(State(s): Shared, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: CreateProject = parse(&body)?;
    let summary = s.store.create_project(&req.name, &req.classes)?;
    Ok((StatusCode::CREATED, Json(summary)))
}

async fn list_projects(State(s): Shared) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(json!({ "projects": s.store.list_projects()? })))
}

async fn get_project(State(s): Shared, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let project = s.store.project(&id)?;
    let summary = project
        .lock()
        .map_err(|_| ApiError::internal("project lock poisoned"))?
        .summary();
    Ok(Json(summary))
}

#[derive(Deserialize)]
struct AddClass {
    name: String,
}

async fn add_class(State(s): Shared, Path(id): Path<String>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: AddClass = parse(&body)?;
    Ok((StatusCode::CREATED, Json(s.store.add_class(&id, &req.name)?)))
}

#[derive(Deserialize)]
struct SampleIn {
    class: String,
    key: Option<String>,
    frame: FrameRecord,
}

#[derive(Deserialize)]
struct UploadSamples {
    samples: Vec<SampleIn>,
}

/// Converts a wire frame and checks that it can be normalized.
pub fn checked_frame(rec: &FrameRecord) -> Result<FrameLandmarks, gestureforge_core::Error> {
    let frame = rec.to_frame()?;
    normalize_landmarks(&frame, &NormalizationConfig::default())?;
    Ok(frame)
}

fn sample_error(i: usize, e: gestureforge_core::Error) -> ApiError {
    let mut err = ApiError::from(e);
    err.status = StatusCode::BAD_REQUEST;
    err.reason = format!("sample {i}: {}", err.reason);
    err
}

async fn upload_samples(State(s): Shared, Path(id): Path<String>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: UploadSamples = parse(&body)?;
    let samples = req
        .samples
        .into_iter()
        .enumerate()
        .map(|(i, x)| {
            Ok(NewSample {
                frame: checked_frame(&x.frame).map_err(|e| sample_error(i, e))?,
                class: x.class,
                key: x.key,
            })
        })
        .collect::<Result<Vec<_>, ApiError>>()?;
    let store = s.store.clone();
    let outcome = tokio::task::spawn_blocking(move || store.append_samples(&id, samples))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(outcome))
}

#[derive(Deserialize)]
struct StartJob {
    regime: String,
    k: usize,
    #[serde(default)]
    seed: u64,
    lr_head: Option<f64>,
    lr_embedder: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    hidden_dims: Option<Vec<usize>>,
    dropout_rate: Option<f64>,
}

impl StartJob {
    fn into_parts(self) -> Result<(TrainSpec, HeadOptions), ApiError> {
        let regime: Regime = self.regime.parse()?;
        let mut spec = TrainSpec::new(regime, self.k, self.seed);
        if let Some(v) = self.lr_head {
            spec.lr_head = v;
        }
        if let Some(v) = self.lr_embedder {
            spec.lr_embedder = v;
        }
        if let Some(v) = self.batch_size {
            spec.batch_size = v;
        }
        if let Some(v) = self.epochs {
            spec.epochs = v;
        }
        let mut head = HeadOptions::default();
        if let Some(v) = self.hidden_dims {
            head.hidden_dims = v;
        }
        if let Some(v) = self.dropout_rate {
            head.dropout_rate = v;
        }
        Ok((spec, head))
    }
}

async fn start_job(State(s): Shared, Path(id): Path<String>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let (spec, head) = parse::<StartJob>(&body)?.into_parts()?;
    let job = s.jobs.submit(s.store.clone(), s.embedder.clone(), id, spec, head)?;
    Ok((StatusCode::ACCEPTED, Json(job)))
}

#[derive(Deserialize)]
struct JobFilter {
    project_id: Option<String>,
}

async fn list_jobs(State(s): Shared, Query(f): Query<JobFilter>) -> Result<impl IntoResponse, ApiError> {
    let jobs: Vec<_> = s
        .jobs
        .list()?
        .into_iter()
        .filter(|j| f.project_id.as_ref().is_none_or(|p| &j.project_id == p))
        .collect();
    Ok(Json(json!({ "jobs": jobs })))
}

async fn get_job(State(s): Shared, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(s.jobs.get(&id)?))
}

async fn list_models(State(s): Shared) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(json!({ "models": s.store.list_models()? })))
}

async fn get_model(State(s): Shared, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let entry = s.store.model(&id)?;
    Ok(Json(
        json!({ "meta": entry.meta, "training": entry.model.meta, "head": entry.model.head_config }),
    ))
}

async fn download_model(State(s): Shared, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let bytes = s.store.model_bytes(&id)?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/octet-stream".to_string()),
            (
                header::CONTENT_DISPOSITION,
                format!("attachment; filename=\"{id}.gfm\""),
            ),
        ],
        bytes,
    ))
}

#[derive(Deserialize)]
struct EvalSample {
    class: String,
    frame: FrameRecord,
}

/// Either a project whose samples form the split, or inline samples.
#[derive(Deserialize)]
struct EvalRequest {
    project_id: Option<String>,
    samples: Option<Vec<EvalSample>>,
}

async fn eval_model(State(s): Shared, Path(id): Path<String>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: EvalRequest = parse(&body)?;
    let entry = s.store.model(&id)?;
    let split: Vec<LabeledFrame> = match (req.project_id, req.samples) {
        (Some(pid), None) => s.store.snapshot(&pid)?.1,
        (None, Some(samples)) => samples
            .into_iter()
            .enumerate()
            .map(|(i, x)| Ok((checked_frame(&x.frame).map_err(|e| sample_error(i, e))?, x.class)))
            .collect::<Result<_, ApiError>>()?,
        _ => {
            return Err(ApiError::bad_request(
                "invalid_request",
                "give exactly one of project_id or samples",
            ))
        }
    };
    if split.is_empty() {
        return Err(ApiError::bad_request("empty_split", "evaluation split has no samples"));
    }
    let report = tokio::task::spawn_blocking(move || evaluate(&entry.model, &split))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(report))
}
