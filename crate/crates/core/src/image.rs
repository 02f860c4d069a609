//! 8-bit image buffers and the pure parts of the data pipeline: bilinear
//! resize (half-pixel centers), horizontal flip, rotation about the center
//! with black fill, random augmentation and conversion to `[C, H, W]`
//! tensors scaled to `[0, 1]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::rng::{unit_f64, SeededRng};
use crate::{Error, Result, Tensor};

/// Interleaved 8-bit pixels, rows top to bottom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(
                "image dimensions must be positive".into(),
            ));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::LengthMismatch {
                shape: vec![height, width, channels],
                expected: width * height * channels,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Grayscale replicated into three channels; RGB returned unchanged.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let pixels = self.pixels.iter().flat_map(|&v| [v, v, v]).collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 3,
            pixels,
        }
    }

    /// Rec. 601 luma for RGB input; grayscale returned unchanged.
    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let pixels = self
            .pixels
            .chunks(3)
            .map(|p| {
                let l = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                quantize(l)
            })
            .collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            pixels,
        }
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    libm::round(v).clamp(0.0, 255.0) as u8
}

/// Half-pixel-center source coordinate and interpolation weights along one axis.
fn axis_taps(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = libm::floor(s) as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling of a single-plane `f64` grid (row-major,
/// `width * height`), half-pixel centers, edge-clamped.
pub fn resize_grid(
    grid: &[f64],
    width: usize,
    height: usize,
    out_w: usize,
    out_h: usize,
) -> Vec<f64> {
    let xs = axis_taps(out_w, width);
    let ys = axis_taps(out_h, height);
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = grid[y0 * width + x0] * (1.0 - fx) + grid[y0 * width + x1] * fx;
            let bottom = grid[y1 * width + x0] * (1.0 - fx) + grid[y1 * width + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Bilinear resize with half-pixel centers; output rounded and clamped to `[0, 255]`.
pub fn resize_bilinear(img: &ImageBuffer, out_w: usize, out_h: usize) -> Result<ImageBuffer> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument(
            "resize target must be at least 1x1".into(),
        ));
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let c = img.channels;
    let mut pixels = vec![0u8; out_w * out_h * c];
    for ch in 0..c {
        let plane: Vec<f64> = img
            .pixels
            .iter()
            .skip(ch)
            .step_by(c)
            .map(|&v| v as f64)
            .collect();
        let resized = resize_grid(&plane, img.width, img.height, out_w, out_h);
        for (i, v) in resized.into_iter().enumerate() {
            pixels[i * c + ch] = quantize(v);
        }
    }
    ImageBuffer::new(out_w, out_h, c, pixels)
}

pub fn hflip(img: &ImageBuffer) -> ImageBuffer {
    let (w, c) = (img.width, img.channels);
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for row in img.pixels.chunks(w * c) {
        for x in (0..w).rev() {
            pixels.extend_from_slice(&row[x * c..(x + 1) * c]);
        }
    }
    ImageBuffer {
        width: w,
        height: img.height,
        channels: c,
        pixels,
    }
}

/// Rotation by `degrees` (counter-clockwise in image coordinates) about the
/// image center with bilinear resampling. Samples outside the source are 0.
pub fn rotate(img: &ImageBuffer, degrees: f64) -> ImageBuffer {
    if degrees == 0.0 {
        return img.clone();
    }
    let (w, h, c) = (img.width, img.height, img.channels);
    let theta = degrees.to_radians();
    let (sin, cos) = (libm::sin(theta), libm::cos(theta));
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let fetch = |x: isize, y: isize, ch: usize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            img.pixels[(y as usize * w + x as usize) * c + ch] as f64
        }
    };
    let mut pixels = vec![0u8; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            // Inverse mapping: rotate the output coordinate by -theta.
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (x0, y0) = (libm::floor(sx), libm::floor(sy));
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let top = fetch(x0, y0, ch) * (1.0 - fx) + fetch(x0 + 1, y0, ch) * fx;
                let bottom = fetch(x0, y0 + 1, ch) * (1.0 - fx) + fetch(x0 + 1, y0 + 1, ch) * fx;
                pixels[(y * w + x) * c + ch] = quantize(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    ImageBuffer {
        width: w,
        height: h,
        channels: c,
        pixels,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub hflip_prob: f64,
    pub rotation_max_degrees: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            rotation_max_degrees: 10.0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob)
            || self.rotation_max_degrees.is_nan()
            || self.rotation_max_degrees < 0.0
        {
            return Err(Error::InvalidArgument(
                "augmentation needs 0 <= hflip_prob <= 1 and rotation_max_degrees >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Random horizontal mirror, then a uniform rotation in `[-max, +max]` degrees.
pub fn augment(img: &ImageBuffer, config: &AugmentationConfig, rng: &mut SeededRng) -> ImageBuffer {
    let flip = unit_f64(rng) < config.hflip_prob;
    let angle = (2.0 * unit_f64(rng) - 1.0) * config.rotation_max_degrees;
    let img = if flip { hflip(img) } else { img.clone() };
    rotate(&img, angle)
}

/// `[C, H, W]` tensor with pixels divided by 255. A 1-channel image is
/// replicated when the model expects 3 channels; any other mismatch fails.
pub fn to_tensor(img: &ImageBuffer, model_channels: usize) -> Result<Tensor<f32>> {
    let (w, h, c) = (img.width, img.height, img.channels);
    let replicate = c == 1 && model_channels == 3;
    if c != model_channels && !replicate {
        return Err(Error::InvalidArgument(format!(
            "image has {c} channels, model expects {model_channels}"
        )));
    }
    let mut data = Vec::with_capacity(model_channels * w * h);
    for ch in 0..model_channels {
        let src = if replicate { 0 } else { ch };
        data.extend(
            img.pixels
                .iter()
                .skip(src)
                .step_by(c)
                .map(|&v| v as f32 / 255.0),
        );
    }
    Tensor::from_vec(&[model_channels, h, w], data)
}
