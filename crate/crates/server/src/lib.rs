//! HTTP front end for the inference workflow.
//!
//! Routes:
//!
//! * `POST /api/v1/predict`: multipart upload with one `file` field and
//!   optional `frames`, `threshold` and `seed` query parameters. Responds
//!   with a [`PredictionReport`].
//! * `GET /api/v1/health`: `{status, model_id, backend_name}`.
//!
//! Uploads are held in memory only and dropped once the response is built.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::multipart::MultipartError;
use axum::extract::{DefaultBodyLimit, Multipart, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};
use veriframe::faces::{DetectorRegistry, FaceDetector, FaceError};
use veriframe::service::{classify_media, PredictParams, PredictionReport, ServiceError};
use veriframe::trainer::{load_model, ArtifactError};
use veriframe::video::{detect_media_kind, VideoError};
use veriframe::LoadedModel;

pub const DEFAULT_MAX_UPLOAD_MB: u64 = 50;
pub const DEFAULT_PORT: u16 = 8080;
/// Allowance for multipart boundaries and part headers on top of the file.
const MULTIPART_SLACK: usize = 64 * 1024;

/// The `service.*` configuration keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub model_artifact: Option<PathBuf>,
    pub detector: String,
    pub max_upload_mb: u64,
    pub port: u16,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            model_artifact: None,
            detector: "stub".into(),
            max_upload_mb: DEFAULT_MAX_UPLOAD_MB,
            port: DEFAULT_PORT,
        }
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Detector(#[from] FaceError),
    #[error("cannot load model artifact {path}: {source}")]
    Artifact {
        path: PathBuf,
        #[source]
        source: ArtifactError,
    },
    #[error("no model artifact configured")]
    NoArtifact,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shared, hot-swappable server state.
pub struct AppState {
    model: RwLock<Option<Arc<LoadedModel>>>,
    artifact_path: Option<PathBuf>,
    detector: Arc<dyn FaceDetector>,
    max_upload_bytes: usize,
}

impl AppState {
    /// Resolves the detector and loads the artifact if one is configured.
    pub fn new(config: &ServerConfig, detectors: &DetectorRegistry) -> Result<Self, ServerError> {
        let detector = detectors.create(&config.detector)?;
        let state = Self {
            model: RwLock::new(None),
            artifact_path: config.model_artifact.clone(),
            detector,
            max_upload_bytes: (config.max_upload_mb as usize).saturating_mul(1024 * 1024),
        };
        if state.artifact_path.is_some() {
            state.reload()?;
        }
        Ok(state)
    }

    pub fn with_max_upload_bytes(mut self, bytes: usize) -> Self {
        self.max_upload_bytes = bytes;
        self
    }

    pub fn max_upload_bytes(&self) -> usize {
        self.max_upload_bytes
    }

    /// Re-reads the configured artifact and swaps it in. In-flight requests
    /// keep the model they started with.
    pub fn reload(&self) -> Result<String, ServerError> {
        let path = self.artifact_path.as_ref().ok_or(ServerError::NoArtifact)?;
        let loaded = load_model(path).map_err(|source| ServerError::Artifact {
            path: path.clone(),
            source,
        })?;
        let id = loaded.model_id().to_string();
        *self.model.write().expect("model lock") = Some(Arc::new(loaded));
        info!(model_id = %id, "model loaded");
        Ok(id)
    }

    pub fn model(&self) -> Option<Arc<LoadedModel>> {
        self.model.read().expect("model lock").clone()
    }

    pub fn detector_name(&self) -> &str {
        self.detector.name()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_id: Option<String>,
    pub backend_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    pub message: String,
}

fn error(status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    (
        status,
        Json(ApiError {
            error: code.into(),
            message: message.into(),
        }),
    )
        .into_response()
}

#[derive(Debug, Deserialize)]
struct PredictQuery {
    frames: Option<usize>,
    threshold: Option<f64>,
    seed: Option<u64>,
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    let model = state.model();
    let body = Health {
        status: if model.is_some() { "ok" } else { "unavailable" }.into(),
        model_id: model.map(|m| m.model_id().to_string()),
        backend_name: state.detector_name().to_string(),
    };
    let code = if body.model_id.is_some() {
        StatusCode::OK
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    };
    (code, Json(body)).into_response()
}

fn multipart_error(e: MultipartError) -> Response {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        error(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", e.body_text())
    } else {
        error(StatusCode::BAD_REQUEST, "invalid_request", e.body_text())
    }
}

async fn predict(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    query: Result<Query<PredictQuery>, axum::extract::rejection::QueryRejection>,
    multipart: Result<Multipart, axum::extract::multipart::MultipartRejection>,
) -> Response {
    let declared = headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok());
    if declared.is_some_and(|n| n > state.max_upload_bytes + MULTIPART_SLACK) {
        return error(
            StatusCode::PAYLOAD_TOO_LARGE,
            "payload_too_large",
            format!("upload exceeds {} bytes", state.max_upload_bytes),
        );
    }
    let Some(model) = state.model() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", "no model artifact is loaded");
    };
    let Query(q) = match query {
        Ok(q) => q,
        Err(e) => return error(StatusCode::BAD_REQUEST, "invalid_parameter", e.body_text()),
    };
    let mut multipart = match multipart {
        Ok(m) => m,
        Err(e) => return error(StatusCode::BAD_REQUEST, "missing_file", e.body_text()),
    };

    let mut upload = None;
    loop {
        match multipart.next_field().await {
            Ok(Some(field)) if field.name() == Some("file") => {
                let filename = field.file_name().map(str::to_string);
                match field.bytes().await {
                    Ok(b) => upload = Some((b, filename)),
                    Err(e) => return multipart_error(e),
                }
                break;
            }
            Ok(Some(_)) => continue,
            Ok(None) => break,
            Err(e) => return multipart_error(e),
        }
    }
    let Some((bytes, filename)) = upload else {
        return error(StatusCode::BAD_REQUEST, "missing_file", "multipart field `file` is required");
    };
    if bytes.len() > state.max_upload_bytes {
        return error(
            StatusCode::PAYLOAD_TOO_LARGE,
            "payload_too_large",
            format!("upload exceeds {} bytes", state.max_upload_bytes),
        );
    }
    let Some(kind) = detect_media_kind(&bytes, filename.as_deref()) else {
        return error(StatusCode::BAD_REQUEST, "unsupported_media", "payload is neither a supported image nor video");
    };

    let defaults = PredictParams::default();
    let params = PredictParams {
        frames: q.frames.unwrap_or(defaults.frames),
        threshold: q.threshold.unwrap_or(defaults.threshold),
        seed: q.seed,
    };
    let detector = state.detector.clone();
    let result = tokio::task::spawn_blocking(move || {
        classify_media(&bytes, kind, &model, detector.as_ref(), &params)
    })
    .await;
    match result {
        Ok(Ok(report)) => (StatusCode::OK, Json::<PredictionReport>(report)).into_response(),
        Ok(Err(e)) => service_error(e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

fn service_error(e: ServiceError) -> Response {
    match &e {
        ServiceError::InvalidParams(_) => error(StatusCode::BAD_REQUEST, "invalid_parameter", e.to_string()),
        ServiceError::Media(VideoError::Unsupported(_)) => {
            error(StatusCode::BAD_REQUEST, "unsupported_media", e.to_string())
        }
        _ if e.is_client_error() => error(StatusCode::BAD_REQUEST, "invalid_media", e.to_string()),
        _ => {
            warn!(error = %e, "prediction failed");
            error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.max_upload_bytes.saturating_add(MULTIPART_SLACK);
    Router::new()
        .route("/api/v1/predict", post(predict))
        .route("/api/v1/health", get(health))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Serves until the process is interrupted. On Unix, `SIGHUP` reloads the
/// model artifact.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> Result<(), ServerError> {
    #[cfg(unix)]
    {
        let state = state.clone();
        let mut hup = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::hangup())?;
        tokio::spawn(async move {
            while hup.recv().await.is_some() {
                if let Err(e) = state.reload() {
                    warn!(error = %e, "reload failed; keeping the current model");
                }
            }
        });
    }
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
