//! Inference shared by `pneunet predict` and the HTTP service.

use std::time::Instant;

use base64::Engine;
use pneunet_core::cam::{grad_cam, render_overlay, Heatmap};
use pneunet_core::image::{resize_bilinear, to_tensor, ImageBuffer};
use pneunet_core::model::ModelGraph;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Metadata};
use crate::dataset::{decode_image, encode_png};
use crate::error::{Error, Result};

pub const POSITIVE: &str = "PNEUMONIA";
pub const NEGATIVE: &str = "NORMAL";
pub const OVERLAY_BLEND: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub label: String,
    pub probability: f32,
    pub threshold: f32,
    /// Base64 PNG overlay; only for positives unless requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmap_png: Option<String>,
    pub model_version: String,
    pub latency_ms: f64,
}

/// Service-side label rule: positive only when strictly above the threshold.
pub fn label_for(probability: f32, threshold: f32) -> &'static str {
    if probability > threshold {
        POSITIVE
    } else {
        NEGATIVE
    }
}

/// Loaded model plus what the responses report about it. Immutable, so one
/// instance can serve concurrent requests.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub model: ModelGraph,
    pub metadata: Metadata,
    pub version: String,
    pub threshold: f32,
}

pub struct Prepared {
    /// Input image resized to the model resolution.
    pub resized: ImageBuffer,
    pub tensor: pneunet_core::Tensor<f32>,
}

impl Predictor {
    pub fn from_checkpoint_bytes(bytes: &[u8], threshold: Option<f32>) -> Result<Self> {
        let ck = checkpoint::from_bytes(bytes)?;
        if ck.model.is_backbone_only() {
            return Err(Error::Invalid(
                "checkpoint holds a backbone only, not a classifier".into(),
            ));
        }
        let threshold = threshold.unwrap_or(ck.model.threshold());
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Invalid("threshold must be in [0, 1]".into()));
        }
        Ok(Self {
            version: checkpoint::version_tag(bytes),
            threshold,
            model: ck.model,
            metadata: ck.metadata,
        })
    }

    pub fn load(path: &std::path::Path, threshold: Option<f32>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, threshold)
    }

    pub fn prepare(&self, img: &ImageBuffer) -> Result<Prepared> {
        let [c, h, w] = self.model.input_shape();
        let resized = resize_bilinear(img, w, h)?;
        let tensor = to_tensor(&resized, c)?;
        Ok(Prepared { resized, tensor })
    }

    pub fn heatmap(&self, prepared: &Prepared) -> Result<Heatmap> {
        Ok(grad_cam(&self.model, &prepared.tensor)?)
    }

    /// PNG bytes of the CAM overlay on the resized input.
    pub fn overlay_png(&self, prepared: &Prepared, heatmap: &Heatmap) -> Result<Vec<u8>> {
        let overlay = render_overlay(&prepared.resized, heatmap, OVERLAY_BLEND)?;
        encode_png(&overlay.image)
    }

    pub fn predict_image(
        &self,
        img: &ImageBuffer,
        threshold: Option<f32>,
        always_cam: bool,
    ) -> Result<PredictionResult> {
        let start = Instant::now();
        let threshold = threshold.unwrap_or(self.threshold);
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Invalid("threshold must be in [0, 1]".into()));
        }
        let prepared = self.prepare(img)?;
        let probability = self.model.predict(&prepared.tensor)?;
        let label = label_for(probability, threshold);
        let heatmap_png = if label == POSITIVE || always_cam {
            let hm = self.heatmap(&prepared)?;
            let png = self.overlay_png(&prepared, &hm)?;
            Some(base64::engine::general_purpose::STANDARD.encode(png))
        } else {
            None
        };
        Ok(PredictionResult {
            label: label.to_string(),
            probability,
            threshold,
            heatmap_png,
            model_version: self.version.clone(),
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn predict_bytes(
        &self,
        bytes: &[u8],
        threshold: Option<f32>,
        always_cam: bool,
    ) -> Result<PredictionResult> {
        let img = decode_image(bytes)?;
        self.predict_image(&img, threshold, always_cam)
    }
}
