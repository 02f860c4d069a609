//! Central finite-difference oracle for tape gradients.
//!
//! A case draws inputs (rounded to `f32` so both precisions see the same
//! point), records a scalar on a tape of either precision, and the analytic
//! gradient is compared coordinate-wise against `(f(x+h) - f(x-h)) / 2h`
//! evaluated in `f64`. Coordinates sitting within `h` of a kink (ReLU at 0,
//! max-pool ties, clamp bounds) make the difference quotient meaningless, so
//! such draws are detected and resampled.

use alloc::string::String;
use alloc::vec::Vec;

use crate::rng::{stream, SeededRng};
use crate::{Error, Real, Result, Tape, Tensor, Var};

pub mod cases;

pub const FD_STEP: f64 = 1e-4;
/// Denominator floor of the relative error. Gradient entries smaller than
/// this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-2;

pub struct Sample {
    /// Differentiated inputs.
    pub inputs: Vec<Tensor<f64>>,
    /// Fixed side data (labels, strides, ...), not differentiated.
    pub aux: Vec<f64>,
}

pub trait GradCase {
    fn name(&self) -> String;
    fn sample(&self, rng: &mut SeededRng) -> Sample;
    fn build<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Var], aux: &[f64]) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-3,
            Precision::F64 => 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CheckOutcome {
    /// Largest coordinate-wise relative error.
    Checked { max_rel_error: f64, coords: usize },
    /// A coordinate sits on a kink; the draw should be replaced.
    Kink,
}

fn value<T: Real, C: GradCase + ?Sized>(
    case: &C,
    inputs: &[Tensor<f64>],
    aux: &[f64],
) -> Result<f64> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.cast())).collect();
    let out = case.build(&mut tape, &vars, aux)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::NonScalarLoss(tape.value(out).shape().to_vec()));
    }
    Ok(tape.value(out).data()[0].as_f64())
}

fn analytic<T: Real, C: GradCase + ?Sized>(case: &C, sample: &Sample) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = sample.inputs.iter().map(|t| tape.param(t.cast())).collect();
    let out = case.build(&mut tape, &vars, &sample.aux)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(&sample.inputs)
        .map(|(&v, t)| match grads.get(v) {
            Some(g) => g.data().iter().map(|x| x.as_f64()).collect(),
            None => alloc::vec![0.0; t.len()],
        })
        .collect())
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` in `f64`.
fn central<C: GradCase + ?Sized>(
    case: &C,
    sample: &Sample,
    which: usize,
    i: usize,
    h: f64,
) -> Result<f64> {
    let mut inputs = sample.inputs.clone();
    let base = inputs[which].data()[i];
    let shape = inputs[which].shape().to_vec();
    let mut data = inputs[which].data().to_vec();
    data[i] = base + h;
    inputs[which] = Tensor::from_vec(&shape, data.clone())?;
    let plus = value::<f64, C>(case, &inputs, &sample.aux)?;
    data[i] = base - h;
    inputs[which] = Tensor::from_vec(&shape, data)?;
    let minus = value::<f64, C>(case, &inputs, &sample.aux)?;
    Ok((plus - minus) / (2.0 * h))
}

pub fn check_sample<C: GradCase + ?Sized>(
    case: &C,
    sample: &Sample,
    precision: Precision,
) -> Result<CheckOutcome> {
    let grads = match precision {
        Precision::F32 => analytic::<f32, C>(case, sample)?,
        Precision::F64 => analytic::<f64, C>(case, sample)?,
    };
    let mut worst = 0.0f64;
    let mut coords = 0;
    for (which, g) in grads.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let n = central(case, sample, which, i, FD_STEP)?;
            let n_half = central(case, sample, which, i, FD_STEP / 2.0)?;
            // Smooth functions agree to O(h^2): halving h again divides the
            // disagreement by four. A kink inside the stencil breaks that.
            let d1 = n - n_half;
            if d1.abs() > 1e-6 * n.abs().max(1.0) {
                let d2 = n_half - central(case, sample, which, i, FD_STEP / 4.0)?;
                let ratio = d1 / d2;
                if !(3.0..=5.0).contains(&ratio) {
                    return Ok(CheckOutcome::Kink);
                }
            }
            // Richardson extrapolation cancels the h^2 term.
            let n = (4.0 * n_half - n) / 3.0;
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
            coords += 1;
        }
    }
    Ok(CheckOutcome::Checked {
        max_rel_error: worst,
        coords,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub name: String,
    pub cases: usize,
    pub resampled: usize,
    pub worst: f64,
    pub failures: usize,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Runs `n` accepted draws. Kinked draws are replaced, up to `n` times in total.
pub fn run<C: GradCase + ?Sized>(
    case: &C,
    n: usize,
    seed: u64,
    precision: Precision,
) -> Result<Summary> {
    let mut rng = stream(seed, 0xfd, 0);
    let mut summary = Summary {
        name: case.name(),
        cases: 0,
        resampled: 0,
        worst: 0.0,
        failures: 0,
    };
    while summary.cases < n {
        let sample = case.sample(&mut rng);
        match check_sample(case, &sample, precision)? {
            CheckOutcome::Kink => {
                summary.resampled += 1;
                if summary.resampled > n {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "{}: too many draws land on kinks",
                        summary.name
                    )));
                }
            }
            CheckOutcome::Checked { max_rel_error, .. } => {
                summary.cases += 1;
                summary.worst = summary.worst.max(max_rel_error);
                if max_rel_error.is_nan() || max_rel_error > precision.tolerance() {
                    summary.failures += 1;
                }
            }
        }
    }
    Ok(summary)
}

/// Uniform `[lo, hi)` values, rounded to `f32`.
pub fn uniform(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| (lo + (hi - lo) * crate::rng::unit_f64(rng)) as f32 as f64)
        .collect();
    Tensor::from_vec(shape, data).expect("valid shape")
}
