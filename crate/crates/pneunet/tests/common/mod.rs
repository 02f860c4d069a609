//! Fixtures shared by the integration suites.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use pneunet::checkpoint::{self, Metadata};
use pneunet_core::image::ImageBuffer;
use pneunet_core::model::{ModelConfig, ModelGraph};
use pneunet_core::synth::{blob_samples, BlobConfig};
use tower::ServiceExt;

pub const BOUNDARY: &str = "pneunet-test-boundary";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Set `PNEUNET_BLESS=1` to rewrite the golden files.
pub fn blessing() -> bool {
    std::env::var_os("PNEUNET_BLESS").is_some()
}

/// Freshly initialized classifier whose output bias leans positive, so the
/// golden response carries an overlay.
pub fn fixture_model() -> ModelGraph {
    let mut model = ModelGraph::build(&ModelConfig::default(), 7).unwrap();
    let i = model.params().position("head.dense2.bias").unwrap();
    let bias = model.params_mut().tensor_mut(i);
    *bias = pneunet_core::Tensor::from_vec(&[1], vec![1.0]).unwrap();
    model
}

pub fn fixture_metadata() -> Metadata {
    Metadata {
        epoch: 0,
        best_val_loss: None,
        seed: 7,
        created_unix: 1_700_000_000,
    }
}

pub fn fixture_checkpoint_bytes() -> Vec<u8> {
    checkpoint::to_bytes(&fixture_model(), &fixture_metadata()).unwrap()
}

/// One synthetic positive: a bright blob on noise, 64x64 grayscale.
pub fn golden_image() -> ImageBuffer {
    let cfg = BlobConfig {
        positive_fraction: 1.0,
        ..BlobConfig::default()
    };
    blob_samples(1, &cfg, 11, 9).unwrap().remove(0).image
}

pub fn multipart(field: &str, bytes: &[u8]) -> Vec<u8> {
    let mut body = format!(
        "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{field}\"; filename=\"x.pgm\"\r\n\
         Content-Type: application/octet-stream\r\n\r\n"
    )
    .into_bytes();
    body.extend_from_slice(bytes);
    body.extend_from_slice(format!("\r\n--{BOUNDARY}--\r\n").as_bytes());
    body
}

pub fn predict_request(uri: &str, body: Vec<u8>) -> Request<Body> {
    Request::post(uri)
        .header(
            "content-type",
            format!("multipart/form-data; boundary={BOUNDARY}"),
        )
        .body(Body::from(body))
        .unwrap()
}

pub async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, body)
}

/// The response minus its timing field.
pub fn without_latency(body: &[u8]) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(body).unwrap();
    let obj = v.as_object_mut().unwrap();
    assert!(obj.remove("latency_ms").unwrap().as_f64().unwrap() >= 0.0);
    v
}
