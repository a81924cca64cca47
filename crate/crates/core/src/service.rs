//! HTTP JSON service: shape registry, model loading, prompted and full
//! segmentation. Every non-2xx response body is a single [`ApiError`].

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::SystemTime;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use crate::data::{annotate, generate_synthetic_shape, read_dataset, AnnotatedCloud, SynthConfig};
use crate::decoder::PromptQuery;
use crate::geometry::normalize_unit_sphere;
use crate::inference::{
    full_segment_from_predictions, gt_prompts, segment_with_features, FullSegConfig, DEFAULT_ALPHA_CONF,
    DEFAULT_PROPAGATION_K, DEFAULT_PROPAGATION_ROUNDS, DEFAULT_THETA,
};
use crate::model::SegModel;
use crate::nn::Tensor;
use crate::Error;

pub const DEFAULT_SHAPE_POINTS: usize = 2048;
pub const MAX_SHAPE_POINTS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    NotFound,
    InvalidPrompt,
    InvalidScale,
    ModelNotLoaded,
    BadFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(skip)]
    pub status: u16,
}

impl ApiError {
    fn new(status: StatusCode, code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into(), status: status.as_u16() }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, ErrorCode::NotFound, message)
    }

    pub fn bad_format(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, ErrorCode::BadFormat, message)
    }

    fn model_not_loaded() -> Self {
        Self::new(StatusCode::CONFLICT, ErrorCode::ModelNotLoaded, "no model loaded; POST /api/models/load first")
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => Self::not_found(msg),
            Error::InvalidPrompt(_) => Self::new(StatusCode::BAD_REQUEST, ErrorCode::InvalidPrompt, msg),
            Error::Format(_) | Error::Io(_) | Error::Validation(_) | Error::Shape(_) => Self::bad_format(msg),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorCode::BadFormat, msg),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

/// A registered cloud and its lazily computed encoder features, tagged with
/// the model that produced them.
#[derive(Debug)]
pub struct ShapeSession {
    pub id: String,
    pub cloud: AnnotatedCloud,
    pub created: SystemTime,
    features: Mutex<Option<(u64, Arc<Tensor>)>>,
}

#[derive(Clone)]
struct LoadedModel {
    id: u64,
    model: Arc<SegModel>,
}

#[derive(Default)]
struct Inner {
    model: RwLock<Option<LoadedModel>>,
    shapes: RwLock<BTreeMap<String, Arc<ShapeSession>>>,
    next_shape: AtomicU64,
    next_model: AtomicU64,
}

#[derive(Clone, Default)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reads a bundle and makes it the active model. Returns `(model_id, tensor_count)`.
    pub fn load_model(&self, path: &Path) -> crate::Result<(String, usize)> {
        let model = SegModel::load(path)?;
        Ok(self.install_model(model))
    }

    pub fn install_model(&self, model: SegModel) -> (String, usize) {
        let id = self.inner.next_model.fetch_add(1, Ordering::SeqCst) + 1;
        let count = model.tensor_count();
        *self.inner.model.write().unwrap() = Some(LoadedModel { id, model: Arc::new(model) });
        log::info!("model m{id} loaded ({count} tensors)");
        (format!("m{id}"), count)
    }

    pub fn register(&self, cloud: AnnotatedCloud) -> Arc<ShapeSession> {
        let n = self.inner.next_shape.fetch_add(1, Ordering::SeqCst) + 1;
        let id = format!("s{n}");
        let session =
            Arc::new(ShapeSession { id: id.clone(), cloud, created: SystemTime::now(), features: Mutex::new(None) });
        self.inner.shapes.write().unwrap().insert(id, session.clone());
        session
    }

    fn shape(&self, id: &str) -> Result<Arc<ShapeSession>, ApiError> {
        self.inner.shapes.read().unwrap().get(id).cloned().ok_or_else(|| ApiError::not_found(format!("unknown shape {id}")))
    }

    fn model(&self) -> Result<LoadedModel, ApiError> {
        self.inner.model.read().unwrap().clone().ok_or_else(ApiError::model_not_loaded)
    }
}

impl ShapeSession {
    /// Features for `model`, computed at most once per (shape, model).
    fn features(&self, model: &LoadedModel) -> crate::Result<Arc<Tensor>> {
        let mut slot = self.features.lock().unwrap();
        if let Some((id, f)) = slot.as_ref() {
            if *id == model.id {
                return Ok(f.clone());
            }
        }
        let f = Arc::new(model.model.features(&self.cloud.points)?);
        *slot = Some((model.id, f.clone()));
        Ok(f)
    }
}

fn parse_json<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_format(format!("request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorCode::BadFormat, e.to_string()))?
}

#[derive(Debug, Deserialize)]
struct LoadRequest {
    path: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LoadResponse {
    pub model_id: String,
    pub tensor_count: usize,
}

async fn load_model(State(state): State<AppState>, body: Bytes) -> ApiResult<LoadResponse> {
    let req: LoadRequest = parse_json(&body)?;
    let s = state.clone();
    let (model_id, tensor_count) = blocking(move || Ok(s.load_model(Path::new(&req.path))?)).await?;
    Ok(Json(LoadResponse { model_id, tensor_count }))
}

#[derive(Debug, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
enum ShapeRequest {
    Synthetic {
        seed: u64,
        parts: Option<usize>,
        points: Option<usize>,
    },
    Upload {
        /// Base64 of a `PCPD` file; the first record is used.
        pcpd: String,
    },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ShapeCreated {
    pub shape_id: String,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub part_count: Option<usize>,
}

fn build_shape(req: ShapeRequest) -> Result<AnnotatedCloud, ApiError> {
    match req {
        ShapeRequest::Synthetic { seed, parts, points } => {
            let n = points.unwrap_or(DEFAULT_SHAPE_POINTS);
            if n == 0 || n > MAX_SHAPE_POINTS {
                return Err(ApiError::bad_format(format!("points must be in 1..={MAX_SHAPE_POINTS}")));
            }
            let mut cfg = SynthConfig::default();
            if let Some(k) = parts {
                cfg.min_parts = k;
                cfg.max_parts = k;
            }
            Ok(annotate(&generate_synthetic_shape(seed, &cfg)?, n, seed)?)
        }
        ShapeRequest::Upload { pcpd } => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(pcpd.trim())
                .map_err(|e| ApiError::bad_format(format!("pcpd payload is not base64: {e}")))?;
            let mut cloud = read_dataset(&bytes[..])?
                .into_iter()
                .next()
                .ok_or_else(|| ApiError::bad_format("pcpd payload holds no records"))?;
            if cloud.is_empty() {
                return Err(ApiError::bad_format("uploaded cloud has no points"));
            }
            if cloud.points.len() > MAX_SHAPE_POINTS {
                return Err(ApiError::bad_format(format!("uploaded cloud exceeds {MAX_SHAPE_POINTS} points")));
            }
            cloud.points = normalize_unit_sphere(cloud.points.coords())?;
            Ok(cloud)
        }
    }
}

async fn create_shape(State(state): State<AppState>, body: Bytes) -> ApiResult<ShapeCreated> {
    let req: ShapeRequest = parse_json(&body)?;
    let cloud = blocking(move || build_shape(req)).await?;
    let n = cloud.len();
    let part_count = cloud.labels.as_ref().map(|l| l.part_count());
    let session = state.register(cloud);
    Ok(Json(ShapeCreated { shape_id: session.id.clone(), n, part_count }))
}

async fn list_shapes(State(state): State<AppState>) -> Json<Vec<ShapeCreated>> {
    let shapes = state.inner.shapes.read().unwrap();
    Json(
        shapes
            .values()
            .map(|s| ShapeCreated {
                shape_id: s.id.clone(),
                n: s.cloud.len(),
                part_count: s.cloud.labels.as_ref().map(|l| l.part_count()),
            })
            .collect(),
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ShapeView {
    pub shape_id: String,
    pub points: Vec<[f32; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u32>>,
}

async fn get_shape(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<ShapeView> {
    let s = state.shape(&id)?;
    Ok(Json(ShapeView {
        shape_id: s.id.clone(),
        points: s.cloud.points.coords().to_vec(),
        labels: s.cloud.labels.as_ref().map(|l| l.labels().to_vec()),
    }))
}

#[derive(Debug, Deserialize)]
struct SegmentRequest {
    prompt_index: i64,
    scale: Option<f64>,
    threshold: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub probabilities: Vec<f32>,
    pub mask: Vec<bool>,
    pub pi: f64,
    pub scale: Option<f32>,
    pub threshold: f32,
}

fn unit_interval(v: Option<f64>, what: &str, code: ErrorCode) -> Result<Option<f32>, ApiError> {
    match v {
        Some(x) if !(0.0..=1.0).contains(&x) => {
            Err(ApiError::new(StatusCode::BAD_REQUEST, code, format!("{what} {x} outside [0, 1]")))
        }
        other => Ok(other.map(|x| x as f32)),
    }
}

async fn segment(State(state): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<SegmentResponse> {
    let req: SegmentRequest = parse_json(&body)?;
    let shape = state.shape(&id)?;
    let model = state.model()?;
    let scale = unit_interval(req.scale, "scale", ErrorCode::InvalidScale)?;
    let threshold = unit_interval(req.threshold, "threshold", ErrorCode::BadFormat)?.unwrap_or(DEFAULT_THETA);
    let n = shape.cloud.len();
    if req.prompt_index < 0 || req.prompt_index as u64 >= n as u64 {
        return Err(Error::InvalidPrompt(format!("prompt index {} out of range for {n} points", req.prompt_index)).into());
    }
    let prompt = PromptQuery::new(req.prompt_index as usize, scale);
    let pred = blocking(move || {
        let f = shape.features(&model)?;
        Ok(segment_with_features(&model.model, &f, &shape.cloud.points, prompt, threshold)?)
    })
    .await?;
    Ok(Json(SegmentResponse { probabilities: pred.probabilities, mask: pred.mask, pi: pred.pi, scale, threshold }))
}

#[derive(Debug, Default, Deserialize)]
struct FullSegmentRequest {
    theta: Option<f64>,
    alpha_conf: Option<f64>,
    k: Option<usize>,
    /// Also feed each part's point fraction as scale.
    #[serde(default)]
    with_scale: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FullSegmentResponse {
    pub labels: Vec<u32>,
    pub mask_count: usize,
}

async fn full_segment(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<FullSegmentResponse> {
    let req: FullSegmentRequest = if body.is_empty() { FullSegmentRequest::default() } else { parse_json(&body)? };
    let shape = state.shape(&id)?;
    let model = state.model()?;
    let cfg = FullSegConfig {
        theta: unit_interval(req.theta, "theta", ErrorCode::BadFormat)?.unwrap_or(DEFAULT_THETA),
        alpha_conf: unit_interval(req.alpha_conf, "alpha_conf", ErrorCode::BadFormat)?.unwrap_or(DEFAULT_ALPHA_CONF),
        k: req.k.unwrap_or(DEFAULT_PROPAGATION_K),
        rounds: DEFAULT_PROPAGATION_ROUNDS,
    };
    let Some(labels) = shape.cloud.labels.clone() else {
        return Err(Error::InvalidPrompt("full segmentation derives prompts from part labels; this shape has none".into())
            .into());
    };
    let result = blocking(move || {
        let points = &shape.cloud.points;
        let prompts = gt_prompts(&labels, points, req.with_scale)?;
        let f = shape.features(&model)?;
        let confidences = prompts
            .iter()
            .map(|p| Ok(segment_with_features(&model.model, &f, points, *p, cfg.theta)?.probabilities))
            .collect::<crate::Result<Vec<_>>>()?;
        Ok(full_segment_from_predictions(points, confidences, &cfg)?)
    })
    .await?;
    Ok(Json(FullSegmentResponse { labels: result.labels, mask_count: result.masks.len() }))
}

async fn not_found() -> ApiError {
    ApiError::not_found("no such endpoint")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, ErrorCode::BadFormat, "method not allowed")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/models/load", post(load_model))
        .route("/api/shapes", post(create_shape).get(list_shapes))
        .route("/api/shapes/{id}", get(get_shape))
        .route("/api/shapes/{id}/segment", post(segment))
        .route("/api/shapes/{id}/full-segment", post(full_segment))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(CorsLayer::permissive())
        .with_state(state)
}
