//! HTTP front end over the pipeline engine.
//!
//! Generation runs on the blocking pool behind a global concurrency limit.
//! Every failure body has the shape `{"error": {"stage", "code", "message"}}`.

use std::collections::BTreeMap;
use std::future::Future;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::Semaphore;

use tmd_core::metering::{estimate_cost, latency_report, token_report, CostBreakdown, MeterRecord, Stage};
use tmd_core::model::{Scenario, ScenarioKind, ScenarioRequest};
use tmd_core::pipeline::{Engine, GenerateOutcome, StageError};
use tmd_core::sus::{aggregate_sus, GroupBy, SusResponse};
use tmd_core::texture::{decode_mask_png, decode_png, TextureError};

/// Largest accepted request body (inpaint uploads).
pub const MAX_BODY_BYTES: usize = 32 * 1024 * 1024;

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Engine>,
    permits: Arc<Semaphore>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>, max_concurrency: usize) -> Self {
        Self {
            engine,
            permits: Arc::new(Semaphore::new(max_concurrency.max(1))),
        }
    }
}

pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn stage(e: StageError) -> Self {
        Self {
            status: StatusCode::from_u16(e.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            body: json!({ "error": e }),
        }
    }

    fn new(status: StatusCode, stage: Stage, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({"error": {"stage": stage, "code": code, "message": message.into()}}),
        }
    }

    fn malformed_json(e: &serde_json::Error) -> Self {
        let code = if e.is_syntax() || e.is_eof() { "malformed_json" } else { "invalid_body" };
        Self {
            status: StatusCode::BAD_REQUEST,
            body: json!({"error": {
                "stage": Stage::Parse,
                "code": code,
                "message": e.to_string(),
                "line": e.line(),
                "column": e.column(),
            }}),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Debug, Deserialize)]
struct PromptBody {
    #[serde(default)]
    text: String,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    request_id: Option<String>,
}

#[derive(Debug, Deserialize)]
struct LibraryBody {
    #[serde(default)]
    material_id: String,
    #[serde(default)]
    defect_id: String,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    request_id: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct GenerateQuery {
    #[serde(default)]
    inline: bool,
}

/// Body of a successful generation.
#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub request_id: String,
    pub artifact_url: String,
    pub artifact_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_b64: Option<String>,
    pub width: u32,
    pub height: u32,
    pub scenario: ScenarioKind,
    pub backend_id: String,
    pub seed: u64,
    pub original_prompt: String,
    pub tuned_prompt: String,
    pub meter: MeterRecord,
    pub cost: CostBreakdown,
}

impl GenerateResponse {
    pub fn from_outcome(out: GenerateOutcome, inline: bool) -> Self {
        let p = &out.artifact.provenance;
        Self {
            artifact_url: format!("/v1/artifacts/{}", out.request_id),
            artifact_b64: inline.then(|| base64::engine::general_purpose::STANDARD.encode(&out.png)),
            width: out.artifact.width(),
            height: out.artifact.height(),
            scenario: p.scenario,
            backend_id: p.backend_id.clone(),
            seed: p.seed,
            original_prompt: p.original_prompt.clone(),
            request_id: out.request_id,
            artifact_sha256: out.artifact_sha256,
            tuned_prompt: out.tuned_prompt,
            meter: out.meter,
            cost: out.cost,
        }
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::malformed_json(&e))
}

async fn run(state: &AppState, request: ScenarioRequest, received: Instant, inline: bool) -> Result<Json<GenerateResponse>, ApiError> {
    let _permit = state.permits.acquire().await.expect("semaphore is never closed");
    let engine = state.engine.clone();
    let out = tokio::task::spawn_blocking(move || engine.handle(request, received))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, Stage::Generate, "internal", e.to_string()))?
        .map_err(ApiError::stage)?;
    Ok(Json(GenerateResponse::from_outcome(out, inline)))
}

async fn generate_prompt(
    State(state): State<AppState>,
    Query(q): Query<GenerateQuery>,
    body: Bytes,
) -> Result<Json<GenerateResponse>, ApiError> {
    let received = Instant::now();
    let b: PromptBody = parse_json(&body)?;
    let req = ScenarioRequest {
        request_id: b.request_id.unwrap_or_default(),
        seed: b.seed,
        scenario: Scenario::CreativePrompt { text: b.text },
    };
    run(&state, req, received, q.inline).await
}

async fn generate_library(
    State(state): State<AppState>,
    Query(q): Query<GenerateQuery>,
    body: Bytes,
) -> Result<Json<GenerateResponse>, ApiError> {
    let received = Instant::now();
    let b: LibraryBody = parse_json(&body)?;
    let req = ScenarioRequest {
        request_id: b.request_id.unwrap_or_default(),
        seed: b.seed,
        scenario: Scenario::LibrarySelect {
            material_id: b.material_id,
            defect_id: b.defect_id,
        },
    };
    run(&state, req, received, q.inline).await
}

fn multipart_error(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, Stage::Parse, "malformed_multipart", e.to_string())
}

fn image_error(field: &str, e: TextureError) -> ApiError {
    match e {
        TextureError::NonBinaryMask { .. } => {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, Stage::Validate, "non_binary_mask", e.to_string())
        }
        _ => ApiError::new(StatusCode::BAD_REQUEST, Stage::Parse, "bad_image", format!("{field}: {e}")),
    }
}

async fn generate_inpaint(
    State(state): State<AppState>,
    Query(q): Query<GenerateQuery>,
    mut form: Multipart,
) -> Result<Json<GenerateResponse>, ApiError> {
    let received = Instant::now();
    let mut image = None;
    let mut mask = None;
    let mut instruction = String::new();
    let mut seed = None;
    let mut request_id = String::new();
    while let Some(field) = form.next_field().await.map_err(multipart_error)? {
        let name = field.name().unwrap_or_default().to_owned();
        let data = field.bytes().await.map_err(multipart_error)?;
        let text = || String::from_utf8_lossy(&data).trim().to_owned();
        match name.as_str() {
            "image" if !data.is_empty() => image = Some(decode_png(&data).map_err(|e| image_error("image", e))?.image),
            "mask" if !data.is_empty() => mask = Some(decode_mask_png(&data).map_err(|e| image_error("mask", e))?),
            "instruction" => instruction = text(),
            "seed" if !data.is_empty() => {
                seed = Some(text().parse::<u64>().map_err(|e| {
                    ApiError::new(StatusCode::BAD_REQUEST, Stage::Parse, "bad_seed", e.to_string())
                })?)
            }
            "request_id" => request_id = text(),
            _ => {}
        }
    }
    let req = ScenarioRequest {
        request_id,
        seed,
        scenario: Scenario::ImageInpaint {
            image,
            mask,
            instruction,
        },
    };
    run(&state, req, received, q.inline).await
}

async fn artifact(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let id = id.strip_suffix(".png").unwrap_or(&id).to_owned();
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, Stage::Persist, "not_found", format!("no artifact {id:?}"));
    let path = state.engine.artifact_path(&id).ok_or_else(not_found)?;
    let bytes = tokio::fs::read(&path).await.map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn library(State(state): State<AppState>) -> Json<Value> {
    Json(serde_json::to_value(state.engine.library()).expect("library serializes"))
}

/// Latency, token and cost summaries over every persisted record.
pub fn metrics_json(engine: &Engine) -> Value {
    let records = engine.meters().snapshot();
    let mut cost = BTreeMap::new();
    let mut unpriced = 0usize;
    for kind in ScenarioKind::ALL {
        let group: Vec<MeterRecord> = records.iter().filter(|r| r.scenario == kind).cloned().collect();
        if group.is_empty() {
            continue;
        }
        match estimate_cost(&group, engine.rates()) {
            Ok(c) => {
                cost.insert(kind, c);
            }
            Err(_) => unpriced += group.len(),
        }
    }
    let total = cost.values().fold(CostBreakdown::default(), |acc, c| acc + *c);
    json!({
        "records": records.len(),
        "latency": latency_report(&records),
        "tokens": token_report(&records),
        "cost": {"by_scenario": cost, "total": total, "unpriced_records": unpriced},
    })
}

async fn metrics(State(state): State<AppState>) -> Json<Value> {
    let engine = state.engine.clone();
    Json(tokio::task::spawn_blocking(move || metrics_json(&engine)).await.expect("metrics task"))
}

#[derive(Debug, Deserialize)]
struct SusBody {
    responses: Vec<SusResponse>,
    #[serde(default)]
    by: GroupBy,
}

async fn sus_score(body: Bytes) -> Result<Json<Value>, ApiError> {
    let b: SusBody = parse_json(&body)?;
    let report = aggregate_sus(&b.responses, b.by)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, Stage::Validate, "invalid_score", e.to_string()))?;
    Ok(Json(serde_json::to_value(report).expect("report serializes")))
}

async fn healthz() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/generate/library", post(generate_library))
        .route("/v1/generate/prompt", post(generate_prompt))
        .route("/v1/generate/inpaint", post(generate_inpaint))
        .route("/v1/artifacts/{id}", get(artifact))
        .route("/v1/library", get(library))
        .route("/v1/metrics", get(metrics))
        .route("/v1/sus/score", post(sus_score))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    tracing::info!("shutdown requested, draining in-flight requests");
}
