//! HTTP inference service.
//!
//! `POST /api/predict` (multipart field `image`), `GET /api/health`,
//! `GET /api/model`; everything else under `/api` is 404, the rest is served
//! from the optional static directory.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::error::Error;
use crate::infer::Predictor;

pub const MAX_UPLOAD_BYTES: usize = 10 * 1024 * 1024;

#[derive(Clone, Default)]
pub struct AppState {
    pub predictor: Option<Arc<Predictor>>,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn unloaded() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "model not loaded")
}

#[derive(Debug, Deserialize)]
pub struct PredictQuery {
    always_cam: Option<String>,
    threshold: Option<f32>,
}

async fn predict(
    State(state): State<AppState>,
    Query(query): Query<PredictQuery>,
    multipart: Result<Multipart, MultipartRejection>,
) -> Response {
    let Some(predictor) = state.predictor.clone() else {
        return unloaded();
    };
    let mut multipart = match multipart {
        Ok(m) => m,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let mut image = None;
    loop {
        match multipart.next_field().await {
            Ok(Some(field)) => {
                if field.name() != Some("image") {
                    continue;
                }
                match field.bytes().await {
                    Ok(b) => {
                        image = Some(b);
                        break;
                    }
                    Err(e) => return error(e.status(), e.body_text()),
                }
            }
            Ok(None) => break,
            Err(e) => return error(e.status(), e.body_text()),
        }
    }
    let Some(bytes) = image.filter(|b| !b.is_empty()) else {
        return error(StatusCode::BAD_REQUEST, "missing multipart field \"image\"");
    };
    let always_cam = matches!(query.always_cam.as_deref(), Some("1" | "true"));
    let threshold = query.threshold;
    let result =
        tokio::task::spawn_blocking(move || predictor.predict_bytes(&bytes, threshold, always_cam))
            .await;
    match result {
        Ok(Ok(r)) => Json(r).into_response(),
        Ok(Err(e @ (Error::Decode(_) | Error::Invalid(_)))) => {
            error(StatusCode::BAD_REQUEST, e.to_string())
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn health(State(state): State<AppState>) -> Response {
    Json(json!({
        "status": "ok",
        "model_loaded": state.predictor.is_some(),
        "version": state.predictor.as_ref().map(|p| p.version.clone()),
    }))
    .into_response()
}

async fn model_card(State(state): State<AppState>) -> Response {
    let Some(p) = state.predictor.as_ref() else {
        return unloaded();
    };
    let cfg = p.model.config();
    Json(json!({
        "input_shape": cfg.input_shape,
        "threshold": p.threshold,
        "backbone_preset": cfg.backbone_preset,
        "batchnorm": cfg.batchnorm,
        "head_units": cfg.head_units,
        "conv_feature_layer": p.model.conv_feature_layer(),
        "parameter_count": p.model.parameter_count(),
        "metadata": p.metadata,
        "version": p.version,
    }))
    .into_response()
}

async fn api_not_found() -> Response {
    error(StatusCode::NOT_FOUND, "no such endpoint")
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route(
            "/api/predict",
            post(predict).layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES)),
        )
        .route("/api/health", get(health))
        .route("/api/model", get(model_card))
        .route("/api", axum::routing::any(api_not_found))
        .route("/api/{*rest}", axum::routing::any(api_not_found))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { StatusCode::NOT_FOUND }),
    }
}

pub async fn serve(addr: SocketAddr, app: Router) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
