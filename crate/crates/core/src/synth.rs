//! Seeded synthetic datasets.
//!
//! The blob task stands in for the binary X-ray problem: positives carry a
//! bright Gaussian blob in one quadrant, negatives are background noise only.
//! The shapes task (circles, bars, crosses on noise) is the multi-class
//! problem used to pretrain a backbone.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::image::ImageBuffer;
use crate::rng::{normal_f64, purpose, shuffle, stream, unit_f64, SeededRng};
use crate::train::InMemorySource;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    /// Pixel rectangle `(x0, y0, x1, y1)`, half-open, for a `w x h` image.
    pub fn rect(self, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let (mx, my) = (w / 2, h / 2);
        match self {
            Quadrant::TopLeft => (0, 0, mx, my),
            Quadrant::TopRight => (mx, 0, w, my),
            Quadrant::BottomLeft => (0, my, mx, h),
            Quadrant::BottomRight => (mx, my, w, h),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobConfig {
    pub size: usize,
    /// Share of positives; the count is rounded to the nearest integer.
    pub positive_fraction: f64,
    pub noise_mean: f64,
    pub noise_std: f64,
    pub blob_amplitude: f64,
    pub blob_sigma: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            size: 64,
            positive_fraction: 0.5,
            noise_mean: 70.0,
            noise_std: 25.0,
            blob_amplitude: 140.0,
            blob_sigma: 4.0,
        }
    }
}

impl BlobConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::InvalidArgument(
                "blob image size must be at least 8".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::InvalidArgument(
                "positive_fraction must be in [0, 1]".into(),
            ));
        }
        if !(self.noise_std >= 0.0 && self.blob_sigma > 0.0 && self.blob_amplitude.is_finite()) {
            return Err(Error::InvalidArgument(
                "invalid blob noise/amplitude settings".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSample {
    pub image: ImageBuffer,
    pub label: u8,
    /// Where the blob was placed; `None` for negatives.
    pub quadrant: Option<Quadrant>,
}

fn noise_field(size: usize, mean: f64, std: f64, rng: &mut SeededRng) -> Vec<f64> {
    (0..size * size)
        .map(|_| mean + std * normal_f64(rng))
        .collect()
}

fn quantize(field: &[f64]) -> Vec<u8> {
    field
        .iter()
        .map(|&v| libm::round(v).clamp(0.0, 255.0) as u8)
        .collect()
}

fn labels_with_count(n: usize, positives: usize, rng: &mut SeededRng) -> Vec<u8> {
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < positives)).collect();
    shuffle(&mut labels, rng);
    labels
}

/// `n` blob-task samples. `split` separates independent draws under the
/// same seed (e.g. 0 for train, 1 for test).
pub fn blob_samples(
    n: usize,
    config: &BlobConfig,
    seed: u64,
    split: u64,
) -> Result<Vec<BlobSample>> {
    config.validate()?;
    let mut rng = stream(seed, purpose::SYNTH, split);
    let positives = libm::round(n as f64 * config.positive_fraction) as usize;
    let labels = labels_with_count(n, positives.min(n), &mut rng);
    let s = config.size;
    let half = s as f64 / 2.0;
    // Blob centers keep three sigmas from the quadrant borders (capped for
    // small images) so the blob lies inside its quadrant.
    let margin = (3.0 * config.blob_sigma).min(half / 3.0);
    let mut out = Vec::with_capacity(n);
    for label in labels {
        let mut field = noise_field(s, config.noise_mean, config.noise_std, &mut rng);
        let quadrant = if label == 1 {
            let q = Quadrant::ALL[(rng_index(&mut rng, 4)) as usize];
            let (x0, y0, _, _) = q.rect(s, s);
            let cx = x0 as f64 + margin + unit_f64(&mut rng) * (half - 2.0 * margin) - 0.5;
            let cy = y0 as f64 + margin + unit_f64(&mut rng) * (half - 2.0 * margin) - 0.5;
            let inv = 1.0 / (2.0 * config.blob_sigma * config.blob_sigma);
            for y in 0..s {
                for x in 0..s {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let d2 = dx * dx + dy * dy;
                    field[y * s + x] += config.blob_amplitude * libm::exp(-d2 * inv);
                }
            }
            Some(q)
        } else {
            None
        };
        out.push(BlobSample {
            image: ImageBuffer::gray(s, s, quantize(&field))?,
            label,
            quadrant,
        });
    }
    Ok(out)
}

fn rng_index(rng: &mut SeededRng, n: u64) -> u64 {
    use rand::RngCore;
    rng.next_u64() % n
}

/// Drops the quadrant metadata.
pub fn to_source(samples: &[BlobSample]) -> InMemorySource {
    let mut src = InMemorySource::default();
    for s in samples {
        src.push(s.image.clone(), s.label);
    }
    src
}

pub const SHAPE_CLASSES: [&str; 3] = ["circle", "bar", "cross"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesConfig {
    pub size: usize,
    pub noise_mean: f64,
    pub noise_std: f64,
    /// Brightness added inside a shape.
    pub intensity: f64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            size: 64,
            noise_mean: 70.0,
            noise_std: 25.0,
            intensity: 120.0,
        }
    }
}

/// `n` shape images with labels `0 = circle, 1 = bar, 2 = cross`, classes
/// as balanced as `n` allows. Position, size and bar orientation are random.
pub fn shapes_dataset(
    n: usize,
    config: &ShapesConfig,
    seed: u64,
    split: u64,
) -> Result<InMemorySource> {
    let s = config.size;
    if s < 16 {
        return Err(Error::InvalidArgument(
            "shape image size must be at least 16".into(),
        ));
    }
    let mut rng = stream(seed, purpose::SYNTH, (1 << 16) | split);
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
    shuffle(&mut labels, &mut rng);
    let sf = s as f64;
    let mut src = InMemorySource::default();
    for label in labels {
        let mut field = noise_field(s, config.noise_mean, config.noise_std, &mut rng);
        let radius = sf * (0.12 + 0.12 * unit_f64(&mut rng));
        let cx = radius + unit_f64(&mut rng) * (sf - 2.0 * radius);
        let cy = radius + unit_f64(&mut rng) * (sf - 2.0 * radius);
        let thick = (sf * 0.05).max(1.5);
        let vertical = unit_f64(&mut rng) < 0.5;
        for y in 0..s {
            for x in 0..s {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let inside = match label {
                    0 => {
                        let r = libm::sqrt(dx * dx + dy * dy);
                        (r - radius * 0.8).abs() <= thick
                    }
                    1 => {
                        let (along, across) = if vertical { (dy, dx) } else { (dx, dy) };
                        along.abs() <= radius && across.abs() <= thick
                    }
                    _ => {
                        (dx.abs() <= radius && dy.abs() <= thick)
                            || (dy.abs() <= radius && dx.abs() <= thick)
                    }
                };
                if inside {
                    field[y * s + x] += config.intensity;
                }
            }
        }
        src.push(ImageBuffer::gray(s, s, quantize(&field))?, label);
    }
    Ok(src)
}
