//! Focal loss and binary cross-entropy.
//!
//! With `p_t = p` for positives and `1 - p` for negatives and
//! `alpha_t = alpha` / `1 - alpha` likewise, the focal loss of one sample is
//! `-alpha_t * (1 - p_t)^gamma * ln(p_t)`. Leaving `alpha` unset
//! ("balanced off") makes `alpha_t = 1`; with `gamma = 0` the loss is then
//! exactly binary cross-entropy. Batch losses are sample means.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result, Tape, Tensor, Var, PROB_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalLossParams {
    /// Weight of the positive class; `None` disables class balancing.
    pub alpha: Option<f32>,
    pub gamma: f32,
}

impl Default for FocalLossParams {
    fn default() -> Self {
        Self {
            alpha: Some(0.25),
            gamma: 2.0,
        }
    }
}

impl FocalLossParams {
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidArgument(
                    "focal alpha must be in [0, 1]".into(),
                ));
            }
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::InvalidArgument("focal gamma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Focal(FocalLossParams),
    Bce,
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::Focal(FocalLossParams::default())
    }
}

fn check_label(y: u8) -> Result<()> {
    if y > 1 {
        return Err(Error::InvalidLabel(y));
    }
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    let eps = PROB_EPS as f64;
    p.clamp(eps, 1.0 - eps)
}

/// Focal loss of one prediction, evaluated in `f64`.
pub fn focal_loss(p: f64, y: u8, params: &FocalLossParams) -> Result<f64> {
    check_label(y)?;
    let p = clamp_prob(p);
    let (p_t, alpha_t) = if y == 1 {
        (p, params.alpha.map_or(1.0, f64::from))
    } else {
        (1.0 - p, params.alpha.map_or(1.0, |a| 1.0 - a as f64))
    };
    let modulating = libm::pow(1.0 - p_t, params.gamma as f64);
    Ok(-alpha_t * modulating * libm::log(p_t))
}

/// Binary cross-entropy `-[y ln p + (1 - y) ln(1 - p)]` of one prediction.
pub fn bce_loss(p: f64, y: u8) -> Result<f64> {
    check_label(y)?;
    let p = clamp_prob(p);
    Ok(if y == 1 {
        -libm::log(p)
    } else {
        -libm::log(1.0 - p)
    })
}

pub fn loss_value(kind: &LossKind, p: f64, y: u8) -> Result<f64> {
    match kind {
        LossKind::Focal(params) => focal_loss(p, y, params),
        LossKind::Bce => bce_loss(p, y),
    }
}

/// Per-element label tensors `y` and `1 - y` shaped like `probs`.
fn label_tensors<T: Real>(shape: &[usize], labels: &[u8]) -> Result<(Tensor<T>, Tensor<T>)> {
    let n: usize = shape.iter().product();
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            shape: shape.to_vec(),
            expected: n,
            actual: labels.len(),
        });
    }
    let mut y = Vec::with_capacity(n);
    let mut not_y = Vec::with_capacity(n);
    for &l in labels {
        check_label(l)?;
        y.push(T::of(l as f64));
        not_y.push(T::of(1.0 - l as f64));
    }
    Ok((
        Tensor::raw(shape.to_vec(), y),
        Tensor::raw(shape.to_vec(), not_y),
    ))
}

/// Mean focal loss over all elements of `probs`, recorded on the tape.
/// `labels` holds one 0/1 target per element, row-major.
pub fn focal_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    probs: Var,
    labels: &[u8],
    params: &FocalLossParams,
) -> Result<Var> {
    params.validate()?;
    let shape = tape.shape(probs).to_vec();
    let (y, not_y) = label_tensors::<T>(&shape, labels)?;
    let eps = T::of(PROB_EPS as f64);
    let p = tape.clamp(probs, eps, T::one() - eps);
    // p_t = y * p + (1 - y) * (1 - p)
    let yv = tape.constant(y.clone());
    let nyv = tape.constant(not_y.clone());
    let pos = tape.mul(p, yv)?;
    let neg_p = tape.neg(p);
    let one_minus_p = tape.add_scalar(neg_p, T::one());
    let neg = tape.mul(one_minus_p, nyv)?;
    let p_t = tape.add(pos, neg)?;
    let log_pt = tape.log(p_t)?;
    let mut per_sample = tape.neg(log_pt);
    if params.gamma != 0.0 {
        let neg_pt = tape.neg(p_t);
        let one_minus_pt = tape.add_scalar(neg_pt, T::one());
        let modulating = tape.pow(one_minus_pt, T::of(params.gamma as f64))?;
        per_sample = tape.mul(per_sample, modulating)?;
    }
    if let Some(alpha) = params.alpha {
        let a = T::of(alpha as f64);
        let alpha_t: Vec<T> = y
            .data()
            .iter()
            .map(|&yi| yi * a + (T::one() - yi) * (T::one() - a))
            .collect();
        let at = tape.constant(Tensor::raw(shape, alpha_t));
        per_sample = tape.mul(per_sample, at)?;
    }
    Ok(tape.mean(per_sample))
}

/// Mean binary cross-entropy over all elements of `probs`.
pub fn bce_loss_on_tape<T: Real>(tape: &mut Tape<T>, probs: Var, labels: &[u8]) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    let (y, not_y) = label_tensors::<T>(&shape, labels)?;
    let eps = T::of(PROB_EPS as f64);
    let p = tape.clamp(probs, eps, T::one() - eps);
    let log_p = tape.log(p)?;
    let neg_p = tape.neg(p);
    let q = tape.add_scalar(neg_p, T::one());
    let log_q = tape.log(q)?;
    let yv = tape.constant(y);
    let nyv = tape.constant(not_y);
    let a = tape.mul(log_p, yv)?;
    let b = tape.mul(log_q, nyv)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.neg(m))
}

pub fn loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    kind: &LossKind,
    probs: Var,
    labels: &[u8],
) -> Result<Var> {
    match kind {
        LossKind::Focal(params) => focal_loss_on_tape(tape, probs, labels, params),
        LossKind::Bce => bce_loss_on_tape(tape, probs, labels),
    }
}
