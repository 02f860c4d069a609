//! Gradient-weighted class activation maps and heatmap overlays.
//!
//! The map is built from the CAM feature layer `A` (channels `k`) and the
//! gradient of the positive-class logit with respect to it: channel weights
//! are the spatial means of the gradient, the raw map is
//! `relu(sum_k w_k * A_k)`, divided by its maximum when that is positive and
//! left all-zero otherwise, then bilinearly upsampled to the input size.

use alloc::vec::Vec;

use crate::image::{resize_grid, ImageBuffer};
use crate::model::{ForwardOptions, ModelGraph};
use crate::rng::stream;
use crate::{Error, Result, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Normalized map at feature resolution, row-major `grid_h x grid_w`.
    pub grid: Vec<f64>,
    pub grid_w: usize,
    pub grid_h: usize,
    /// Normalized map at input resolution, row-major `height x width`.
    pub upsampled: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

impl Heatmap {
    /// Builds the upsampled map from a normalized grid.
    pub fn from_grid(
        grid: Vec<f64>,
        grid_w: usize,
        grid_h: usize,
        width: usize,
        height: usize,
    ) -> Self {
        let upsampled = resize_grid(&grid, grid_w, grid_h, width, height)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Self {
            grid,
            grid_w,
            grid_h,
            upsampled,
            width,
            height,
        }
    }
}

/// Raw, un-normalized map `relu(sum_k mean(grad_k) * A_k)` for one sample.
/// Both tensors are `[C, h, w]` or `[1, C, h, w]`.
pub fn weighted_activation(
    features: &Tensor<f32>,
    grads: &Tensor<f32>,
) -> Result<(Vec<f64>, usize, usize)> {
    let s = features.shape();
    let (c, h, w) = match *s {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => {
            return Err(Error::InvalidArgument(alloc::format!(
                "CAM features must be a single 4-D sample, got {s:?}"
            )))
        }
    };
    if grads.shape() != s {
        return Err(Error::ShapeMismatch {
            op: "grad_cam",
            left: s.to_vec(),
            right: grads.shape().to_vec(),
        });
    }
    let hw = h * w;
    let mut raw = alloc::vec![0.0f64; hw];
    for k in 0..c {
        let g = &grads.data()[k * hw..(k + 1) * hw];
        let weight = g.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        let a = &features.data()[k * hw..(k + 1) * hw];
        for (r, &av) in raw.iter_mut().zip(a) {
            *r += weight * av as f64;
        }
    }
    for r in &mut raw {
        *r = r.max(0.0);
    }
    Ok((raw, w, h))
}

/// Divides by the maximum; an all-zero map stays all-zero.
pub fn normalize_map(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().copied().fold(0.0f64, f64::max);
    if max > 0.0 {
        raw.iter().map(|&v| (v / max).clamp(0.0, 1.0)).collect()
    } else {
        alloc::vec![0.0; raw.len()]
    }
}

/// Grad-CAM of the positive-class logit for one image `[C, H, W]`. The model
/// is only read; each call records its own tape.
pub fn grad_cam(model: &ModelGraph, image: &Tensor<f32>) -> Result<Heatmap> {
    let [c, h, w] = model.input_shape();
    if image.shape() != [c, h, w] {
        return Err(Error::ShapeMismatch {
            op: "grad_cam input",
            left: alloc::vec![c, h, w],
            right: image.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(image.reshaped(&[1, c, h, w])?);
    let opts = ForwardOptions {
        watch_features: true,
        ..ForwardOptions::eval()
    };
    let mut rng = stream(0, 0, 0);
    let pass = model.forward(&mut tape, x, opts, &mut rng)?;
    let features = pass
        .features
        .ok_or_else(|| Error::Unknown(model.conv_feature_layer().into()))?;
    if tape.shape(features).len() != 4 {
        return Err(Error::InvalidArgument(
            "CAM feature layer is not 4-D".into(),
        ));
    }
    let score = tape.sum(pass.logits);
    let grads = tape.backward(score)?;
    let g = grads
        .get(features)
        .ok_or_else(|| Error::Unknown("feature gradient".into()))?;
    let (raw, gw, gh) = weighted_activation(tape.value(features), g)?;
    Ok(Heatmap::from_grid(normalize_map(&raw), gw, gh, w, h))
}

/// Blue (0) to green (0.5) to red (1), linear in between.
pub fn colormap(h: f64) -> [f64; 3] {
    let h = h.clamp(0.0, 1.0);
    if h <= 0.5 {
        let t = 2.0 * h;
        [0.0, 255.0 * t, 255.0 * (1.0 - t)]
    } else {
        let t = 2.0 * h - 1.0;
        [255.0 * t, 255.0 * (1.0 - t), 0.0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlayImage {
    /// 3-channel 8-bit image at the heatmap's input resolution.
    pub image: ImageBuffer,
    pub blend: f64,
}

/// `out = (1 - blend) * rgb(image) + blend * colormap(h)` per pixel, rounded
/// and clamped to `[0, 255]`.
pub fn render_overlay(image: &ImageBuffer, heatmap: &Heatmap, blend: f64) -> Result<OverlayImage> {
    if !(0.0..=1.0).contains(&blend) {
        return Err(Error::InvalidArgument("blend must be in [0, 1]".into()));
    }
    if image.width() != heatmap.width || image.height() != heatmap.height {
        return Err(Error::ShapeMismatch {
            op: "render_overlay",
            left: alloc::vec![image.height(), image.width()],
            right: alloc::vec![heatmap.height, heatmap.width],
        });
    }
    let rgb = image.to_rgb();
    let mut pixels = Vec::with_capacity(rgb.pixels().len());
    for (px, &h) in rgb.pixels().chunks(3).zip(&heatmap.upsampled) {
        let color = colormap(h);
        for ch in 0..3 {
            let v = (1.0 - blend) * px[ch] as f64 + blend * color[ch];
            pixels.push(libm::round(v).clamp(0.0, 255.0) as u8);
        }
    }
    Ok(OverlayImage {
        image: ImageBuffer::new(image.width(), image.height(), 3, pixels)?,
        blend,
    })
}

/// Share of the upsampled heatmap's mass inside the pixel rectangle
/// `[x0, x1) x [y0, y1)`. Zero for an all-zero map.
pub fn mass_fraction(heatmap: &Heatmap, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
    let total: f64 = heatmap.upsampled.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut inside = 0.0;
    for y in y0..y1.min(heatmap.height) {
        for x in x0..x1.min(heatmap.width) {
            inside += heatmap.upsampled[y * heatmap.width + x];
        }
    }
    inside / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t(shape: &[usize], v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    /// Runs the CAM weighting against `score(A)` differentiated on a tape.
    fn cam_of(
        a: &Tensor<f32>,
        score: impl Fn(&mut Tape<f32>, crate::Var) -> crate::Var,
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let av = tape.param(a.clone());
        let s = score(&mut tape, av);
        let g = tape.backward(s).unwrap();
        let (raw, _, _) = weighted_activation(a, g.get(av).unwrap()).unwrap();
        normalize_map(&raw)
    }

    #[test]
    fn sum_score_on_single_channel() {
        let a = t(&[1, 1, 2, 2], &[2.0, 0.0, 0.0, 0.0]);
        let grid = cam_of(&a, |tape, v| tape.sum(v));
        assert_eq!(grid, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn negative_weighting_gives_zero_map() {
        let a = t(&[1, 2, 2, 2], &[2.0, 0.5, 0.0, 1.0, 3.0, 0.0, 0.1, 0.0]);
        let grid = cam_of(&a, |tape, v| {
            let s = tape.sum(v);
            tape.neg(s)
        });
        assert!(grid.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_map_is_uniform_ones() {
        let a = t(&[1, 1, 3, 3], &[0.7; 9]);
        let grid = cam_of(&a, |tape, v| tape.mean(v));
        assert!(grid.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn normalization_is_scale_invariant() {
        let raw = [0.0, 0.3, 1.7, 0.9];
        let base = normalize_map(&raw);
        for c in [0.01, 3.0, 1e4] {
            let scaled: Vec<f64> = raw.iter().map(|v| v * c).collect();
            for (a, b) in normalize_map(&scaled).iter().zip(&base) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(base.iter().copied().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 255.0]);
        assert_eq!(colormap(0.5), [0.0, 255.0, 0.0]);
        assert_eq!(colormap(1.0), [255.0, 0.0, 0.0]);
    }

    fn flat_heatmap(w: usize, h: usize, v: f64) -> Heatmap {
        Heatmap::from_grid(vec![v; 4], 2, 2, w, h)
    }

    #[test]
    fn overlay_examples() {
        let img = ImageBuffer::gray(3, 2, vec![0, 10, 50, 100, 200, 255]).unwrap();
        let o = render_overlay(&img, &flat_heatmap(3, 2, 0.7), 0.0).unwrap();
        assert_eq!(o.image, img.to_rgb());

        let o = render_overlay(&img, &flat_heatmap(3, 2, 0.0), 0.4).unwrap();
        for (px, &g) in o.image.pixels().chunks(3).zip(img.pixels()) {
            let expect = |c: f64| libm::round(0.6 * g as f64 + 0.4 * c) as u8;
            assert_eq!(px, &[expect(0.0), expect(0.0), expect(255.0)]);
        }

        let black = ImageBuffer::gray(1, 1, vec![0]).unwrap();
        let hm = Heatmap::from_grid(vec![1.0], 1, 1, 1, 1);
        let o = render_overlay(&black, &hm, 1.0).unwrap();
        assert_eq!(o.image.pixels(), &[255, 0, 0]);
    }

    #[test]
    fn overlay_rejects_size_mismatch() {
        let img = ImageBuffer::gray(2, 2, vec![0; 4]).unwrap();
        assert!(render_overlay(&img, &flat_heatmap(3, 2, 0.5), 0.4).is_err());
    }
}
