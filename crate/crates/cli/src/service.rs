//! JSON-over-HTTP inference service.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use cpad_core::eval::{denoise_image, sweep, SweepAxis};
use cpad_core::metrics::{residual_energy, total_variation};
use cpad_core::net::checkpoint;
use cpad_core::net::Accounting;
use cpad_core::{encode, CameraParams, CpadNet, Image, ModelConfig};
use serde::{Deserialize, Serialize};
use tower_http::trace::TraceLayer;

pub const BODY_LIMIT: usize = 32 * 1024 * 1024;
const THUMBNAIL_SIDE: usize = 128;

/// Read-only state shared by all requests.
pub struct AppState {
    net: CpadNet<f32>,
    meta: serde_json::Value,
}

impl AppState {
    pub fn new(net: CpadNet<f32>, meta: serde_json::Value) -> Self {
        Self { net, meta }
    }

    pub fn load(ckpt: &Path) -> cpad_core::Result<Self> {
        let (net, header) = checkpoint::load::<f32>(ckpt)?;
        Ok(Self::new(net, header.meta))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadImage(String),
    #[error("{0}")]
    InvalidParams(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("request body exceeds {BODY_LIMIT} bytes")]
    TooLarge,
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn status_and_code(&self) -> (StatusCode, &'static str) {
        match self {
            Self::BadImage(_) => (StatusCode::BAD_REQUEST, "bad_image"),
            Self::InvalidParams(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_params"),
            Self::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            Self::TooLarge => (StatusCode::PAYLOAD_TOO_LARGE, "too_large"),
            Self::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = self.status_and_code();
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        let body = ErrorBody {
            error: code.to_string(),
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            Self::TooLarge
        } else {
            Self::BadRequest(r.body_text())
        }
    }
}

impl From<cpad_core::Error> for ApiError {
    fn from(e: cpad_core::Error) -> Self {
        use cpad_core::Error as E;
        match e {
            E::InvalidParams(_) | E::MissingRange(_) | E::DeviceOutOfRange { .. } => Self::InvalidParams(e.to_string()),
            E::Image(_) => Self::BadImage(e.to_string()),
            other => Self::Internal(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenoiseRequest {
    /// Base64-encoded PNG.
    pub image: String,
    pub params: CameraParams,
    #[serde(default)]
    pub return_residual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tv_in: f64,
    pub tv_out: f64,
    pub residual_energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseResponse {
    /// Base64-encoded PNG of the same size as the input.
    pub image: String,
    /// `noisy − output` shifted by 0.5, as a base64 PNG.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<String>,
    pub metrics: Metrics,
    pub condition_vector: Vec<f64>,
    pub timing_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRequest {
    pub image: String,
    pub params: CameraParams,
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepItem {
    pub param: f64,
    pub thumbnail: String,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelInfo {
    pub config: ModelConfig,
    pub params: usize,
    /// Multiply-accumulates for one 256×256 input.
    pub macs: usize,
    pub meta: serde_json::Value,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/v1/model", get(model_info))
        .route("/v1/denoise", post(denoise))
        .route("/v1/sweep", post(run_sweep))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .layer(TraceLayer::new_for_http())
        .with_state(state)
}

/// Bind and serve until SIGINT or SIGTERM.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(shutdown_signal())
        .await
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    tracing::info!("shutting down");
}

async fn model_info(State(state): State<Arc<AppState>>) -> Json<ModelInfo> {
    let config = state.net.config().clone();
    let acc = Accounting::of(&config, 256, 256);
    Json(ModelInfo {
        config,
        params: acc.params,
        macs: acc.macs,
        meta: state.meta.clone(),
    })
}

fn decode_image(b64: &str) -> Result<Image, ApiError> {
    let bytes = STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::BadImage(format!("invalid base64: {e}")))?;
    Image::from_png_bytes(&bytes).map_err(|e| ApiError::BadImage(e.to_string()))
}

fn encode_png(img: &Image) -> Result<String, ApiError> {
    Ok(STANDARD.encode(img.to_png_bytes()?))
}

fn metrics(noisy: &Image, out: &Image) -> Result<Metrics, ApiError> {
    Ok(Metrics {
        tv_in: total_variation(noisy),
        tv_out: total_variation(out),
        residual_energy: residual_energy(out, noisy)?,
    })
}

/// Run CPU-bound inference off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

pub fn denoise_request(net: &CpadNet<f32>, req: &DenoiseRequest) -> Result<DenoiseResponse, ApiError> {
    let start = Instant::now();
    let noisy = decode_image(&req.image)?;
    req.params.validate()?;
    let vector = encode(&req.params, &net.config().ranges, net.device_embedding().as_ref())?;
    let out = denoise_image(net, &noisy, &req.params)?;
    let residual = if req.return_residual {
        let r = Image::from_fn(3, noisy.height(), noisy.width(), |c, y, x| {
            0.5 + noisy.at(c, y, x) - out.at(c, y, x)
        });
        Some(encode_png(&r)?)
    } else {
        None
    };
    Ok(DenoiseResponse {
        image: encode_png(&out)?,
        residual,
        metrics: metrics(&noisy, &out)?,
        condition_vector: vector.values().to_vec(),
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

pub fn sweep_request(net: &CpadNet<f32>, req: &SweepRequest) -> Result<Vec<SweepItem>, ApiError> {
    let noisy = decode_image(&req.image)?;
    req.params.validate()?;
    if req.grid.is_empty() {
        return Err(ApiError::InvalidParams("empty sweep grid".into()));
    }
    sweep(net, &noisy, None, &req.params, req.axis, &req.grid)?
        .into_iter()
        .map(|step| {
            Ok(SweepItem {
                param: step.record.value,
                thumbnail: encode_png(&step.output.thumbnail(THUMBNAIL_SIDE)?)?,
                metrics: Metrics {
                    tv_in: total_variation(&noisy),
                    tv_out: step.record.tv,
                    residual_energy: step.record.residual_energy,
                },
            })
        })
        .collect()
}

async fn denoise(
    State(state): State<Arc<AppState>>,
    body: Result<Json<DenoiseRequest>, JsonRejection>,
) -> Result<Json<DenoiseResponse>, ApiError> {
    let Json(req) = body?;
    blocking(move || denoise_request(&state.net, &req)).await.map(Json)
}

async fn run_sweep(
    State(state): State<Arc<AppState>>,
    body: Result<Json<SweepRequest>, JsonRejection>,
) -> Result<Json<Vec<SweepItem>>, ApiError> {
    let Json(req) = body?;
    blocking(move || sweep_request(&state.net, &req)).await.map(Json)
}
