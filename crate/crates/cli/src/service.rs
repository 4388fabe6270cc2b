//! HTTP routes over the shared pipeline.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use bridgelab::data::{reference_sample, ClassName};
use bridgelab::models::Models;
use bridgelab::numerics::io::{encode_png, Dtype, TensorPayload};
use bridgelab::pipeline::{attribute_request, execute, AttributeRequest, ExplainRequest, RunStore};
use bridgelab::Error;
use serde::de::DeserializeOwned;
use serde_json::json;

#[derive(Clone)]
pub struct AppState {
    pub models: Option<Arc<Models>>,
    pub store: RunStore,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    step: Option<usize>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            step: None,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::EmptyRegion => StatusCode::UNPROCESSABLE_ENTITY,
            Error::SamplerDiverged { .. } | Error::ZeroInitialGradient | Error::NonFinite(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
            Error::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        let step = match &e {
            Error::SamplerDiverged { step, .. } => Some(*step),
            _ => None,
        };
        Self {
            status,
            message: e.to_string(),
            step,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message, "status": self.status.as_u16() });
        if let Some(step) = self.step {
            body["step"] = json!(step);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid request: {e}")))
}

fn models(state: &AppState) -> ApiResult<Arc<Models>> {
    state
        .models
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "models are not loaded"))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, Error> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

async fn explain(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let request: ExplainRequest = parse(&body)?;
    let models = models(&state)?;
    let store = state.store.clone();
    let bytes = blocking(move || {
        let run = execute(&models, &request)?;
        store.save(&run)?;
        store.run_bytes(&run.id)
    })
    .await?;
    Ok(json_bytes(bytes))
}

async fn attribute(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let request: AttributeRequest = parse(&body)?;
    let models = models(&state)?;
    let response = blocking(move || attribute_request(&models, &request)).await?;
    Ok(Json(response).into_response())
}

fn not_found(id: &str, e: Error) -> ApiError {
    match e {
        Error::Io { .. } => ApiError::new(StatusCode::NOT_FOUND, format!("no run `{id}`")),
        other => other.into(),
    }
}

async fn get_run(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = state.store.run_bytes(&id).map_err(|e| not_found(&id, e))?;
    Ok(json_bytes(bytes))
}

async fn get_run_image(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let bytes = state.store.image_png(&id).map_err(|e| not_found(&id, e))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn get_models(State(state): State<AppState>) -> Response {
    match &state.models {
        None => Json(json!({ "loaded": false })).into_response(),
        Some(m) => Json(json!({
            "loaded": true,
            "classes": m.classes(),
            "schedule": m.schedule,
            "score": m.score_manifest,
            "classifier": m.classifier_manifest,
        }))
        .into_response(),
    }
}

async fn dataset_sample(
    State(state): State<AppState>,
    Query(query): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, m);
    let class: ClassName = query
        .get("class")
        .ok_or_else(|| bad("missing `class` query parameter".into()))?
        .parse()
        .map_err(ApiError::from)?;
    let number = |key: &str| -> ApiResult<u64> {
        query
            .get(key)
            .map(|v| v.parse::<u64>().map_err(|e| bad(format!("`{key}`: {e}"))))
            .transpose()
            .map(|v| v.unwrap_or(0))
    };
    let index = number("index")? as usize;
    let seed = number("seed")?;
    let label = match &state.models {
        Some(m) => m.class_index(class.as_str())?,
        None => ClassName::ALL.iter().position(|&c| c == class).unwrap_or(0),
    };
    let sample = reference_sample(class, label, index, seed);
    let png = encode_png(&sample.image)?;
    Ok(Json(json!({
        "class": class,
        "label": label,
        "index": index,
        "seed": seed,
        "image": TensorPayload::encode(&sample.image, Dtype::F64),
        "png": base64::engine::general_purpose::STANDARD.encode(png),
        "geometry": sample.geometry,
    }))
    .into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/explain", post(explain))
        .route("/attribute", post(attribute))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/image.png", get(get_run_image))
        .route("/models", get(get_models))
        .route("/dataset/sample", get(dataset_sample))
        .with_state(state)
}
