//! Finite-difference cases for every layer primitive and both losses.
//!
//! Each scalar is `sum(out * R)` for a fixed random projection `R` carried in
//! `aux`, so every output coordinate contributes a distinct weight.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::{run, uniform, GradCase, Precision, Sample, Summary};
use crate::layers::{self, BnVars, ConvVars, Mode, ResidualVars};
use crate::loss::{self, FocalLossParams};
use crate::rng::{stream, unit_f64, SeededRng};
use crate::{Real, Result, Tape, Tensor, Var};

fn projection(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| (unit_f64(rng) * 2.0 - 1.0) as f32 as f64)
        .collect()
}

fn project<T: Real>(tape: &mut Tape<T>, out: Var, weights: &[f64]) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let r = Tensor::from_vec(&shape, weights[..n].iter().map(|&w| T::of(w)).collect())?;
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

pub struct Dense;
impl GradCase for Dense {
    fn name(&self) -> String {
        "dense".to_string()
    }
    fn sample(&self, rng: &mut SeededRng) -> Sample {
        Sample {
            inputs: vec![
                uniform(rng, &[3, 4], -1.0, 1.0),
                uniform(rng, &[4, 2], -1.0, 1.0),
                uniform(rng, &[2], -1.0, 1.0),
            ],
            aux: projection(rng, 6),
        }
    }
    fn build<T: Real>(&self, tape: &mut Tape<T>, v: &[Var], aux: &[f64]) -> Result<Var> {
        let y = layers::dense(tape, v[0], v[1], v[2])?;
        project(tape, y, aux)
    }
}

pub struct MatMul;
impl GradCase for MatMul {
    fn name(&self) -> String {
        "matmul".to_string()
    }
    fn sample(&self, rng: &mut SeededRng) -> Sample {
        Sample {
            inputs: vec![
                uniform(rng, &[2, 3], -1.0, 1.0),
                uniform(rng, &[3, 4], -1.0, 1.0),
            ],
            aux: projection(rng, 8),
        }
    }
    fn build<T: Real>(&self, tape: &mut Tape<T>, v: &[Var], aux: &[f64]) -> Result<Var> {
        let y = tape.matmul(v[0], v[1])?;
        project(tape, y, aux)
    }
}

/// `aux = [stride, padding, projection...]`.
pub struct Conv2d {
    pub stride: usize,
    pub padding: usize,
}
impl GradCase for Conv2d {
    fn name(&self) -> String {
        alloc::format!("conv2d(stride {}, padding {})", self.stride, self.padding)
    }
    fn sample(&self, rng: &mut SeededRng) -> Sample {
        Sample {
            inputs: vec![
                uniform(rng, &[2, 2, 5, 5], -1.0, 1.0),
                uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
                uniform(rng, &[3], -1.0, 1.0),
            ],
            aux: projection(rng, 2 * 3 * 25),
        }
    }
    fn build<T: Real>(&self, tape: &mut Tape<T>, v: &[Var], aux: &[f64]) -> Result<Var> {
        let y = tape.conv2d(v[0], v[1], Some(v[2]), self.stride, self.padding)?;
        project(tape, y, aux)
    }
}

pub struct MaxPool;
impl GradCase for MaxPool {
    fn name(&self) -> String {
        "maxpool2d".to_string()
    }
    fn sample(&self, rng: &mut SeededRng) -> Sample {
        Sample {
            inputs: vec![uniform(rng, &[2, 2, 4, 4], -1.0, 1.0)],
            aux: projection(rng, 16),
        }
    }
    fn build<T: Real>(&self, tape: &mut Tape<T>, v: &[Var], aux: &[f64]) -> Result<Var> {
        let y = tape.maxpool2d(v[0], 2, 2)?;
        project(tape, y, aux)
    }
}

pub struct GlobalAvgPool;
impl GradCase for GlobalAvgPool {
    fn name(&self) -> String {
        "global_avg_pool".to_string()
    }
    fn sample(&self, rng: &mut SeededRng) -> Sample {
        Sample {
            inputs: vec![uniform(rng, &[2, 3, 3, 3], -1.0, 1.0)],
            aux: projection(rng, 6),
        }
    }
    fn build<T: Real>(&self, tape: &mut Tape<T>, v: &[Var], aux: &[f64]) -> Result<Var> {
        let y = tape.global_avg_pool(v[0])?;
        project(tape, y, aux)
    }
}

pub struct Flatten;
impl GradCase for Flatten {
    fn name(&self) -> String {
        "flatten".to_string()
    }
    fn sample(&self, rng: &mut SeededRng) -> Sample {
        Sample {
            inputs: vec![uniform(rng, &[2, 2, 2, 2], -1.0, 1.0)],
            aux: projection(rng, 16),
        }
    }
    fn build<T: Real>(&self, tape: &mut Tape<T>, v: &[Var], aux: &[f64]) -> Result<Var> {
        let y = tape.reshape(v[0], &[2, 8])?;
        project(tape, y, aux)
    }
}

pub struct Relu;
impl GradCase for Relu {
    fn name(&self) -> String {
        "relu".to_string()
    }
    fn sample(&self, rng: &mut SeededRng) -> Sample {
        Sample {
            inputs: vec![uniform(rng, &[12], -1.0, 1.0)],
            aux: projection(rng, 12),
        }
    }
    fn build<T: Real>(&self, tape: &mut Tape<T>, v: &[Var], aux: &[f64]) -> Result<Var> {
        let y = tape.relu(v[0]);
        project(tape, y, aux)
    }
}

pub struct Sigmoid;
impl GradCase for Sigmoid {
    fn name(&self) -> String {
        "sigmoid".to_string()
    }
    fn sample(&self, rng: &mut SeededRng) -> Sample {
        Sample {
            inputs: vec![uniform(rng, &[12], -6.0, 6.0)],
            aux: projection(rng, 12),
        }
    }
    fn build<T: Real>(&self, tape: &mut Tape<T>, v: &[Var], aux: &[f64]) -> Result<Var> {
        let y = tape.sigmoid(v[0]);
        project(tape, y, aux)
    }
}

/// Train-mode dropout with the mask fixed by `aux[0]` (a seed).
pub struct Dropout;
impl GradCase for Dropout {
    fn name(&self) -> String {
        "dropout(train, fixed mask)".to_string()
    }
    fn sample(&self, rng: &mut SeededRng) -> Sample {
        let mut aux = vec![(unit_f64(rng) * 1e6).floor()];
        aux.extend(projection(rng, 20));
        Sample {
            inputs: vec![uniform(rng, &[4, 5], -1.0, 1.0)],
            aux,
        }
    }
    fn build<T: Real>(&self, tape: &mut Tape<T>, v: &[Var], aux: &[f64]) -> Result<Var> {
        let mut rng = stream(aux[0] as u64, crate::rng::purpose::DROPOUT, 0);
        let y = layers::dropout(tape, v[0], 0.5, Mode::Train, &mut rng)?;
        project(tape, y, &aux[1..])
    }
}

/// Inputs: x, gamma, beta. Eval mode reads running statistics from `aux`.
pub struct BatchNorm {
    pub train: bool,
}
impl GradCase for BatchNorm {
    fn name(&self) -> String {
        if self.train {
            "batchnorm(train)"
        } else {
            "batchnorm(eval)"
        }
        .to_string()
    }
    fn sample(&self, rng: &mut SeededRng) -> Sample {
        let inputs = vec![
            uniform(rng, &[3, 2, 2, 2], -1.0, 1.0),
            uniform(rng, &[2], 0.5, 1.5),
            uniform(rng, &[2], -0.5, 0.5),
        ];
        let mut aux = uniform(rng, &[2], -0.5, 0.5).into_data();
        aux.extend(uniform(rng, &[2], 0.5, 2.0).into_data());
        aux.extend(projection(rng, 24));
        Sample { inputs, aux }
    }
    fn build<T: Real>(&self, tape: &mut Tape<T>, v: &[Var], aux: &[f64]) -> Result<Var> {
        let mean: Vec<T> = aux[0..2].iter().map(|&x| T::of(x)).collect();
        let var: Vec<T> = aux[2..4].iter().map(|&x| T::of(x)).collect();
        let bn = BnVars {
            gamma: v[1],
            beta: v[2],
            running_mean: &mean,
            running_var: &var,
            batch_stats: self.train,
        };
        let (y, _) = layers::batchnorm(tape, v[0], &bn)?;
        project(tape, y, &aux[4..])
    }
}

/// A residual block; with `project` the skip path is a strided 1x1 conv.
/// Inputs: x, conv1, gamma1, beta1, conv2, gamma2, beta2 [, proj, gamma_p, beta_p].
pub struct Residual {
    pub projection: bool,
}
impl GradCase for Residual {
    fn name(&self) -> String {
        if self.projection {
            "residual_block(projection, stride 2)"
        } else {
            "residual_block(identity)"
        }
        .to_string()
    }
    fn sample(&self, rng: &mut SeededRng) -> Sample {
        let (cin, cout) = if self.projection { (2, 3) } else { (2, 2) };
        let mut inputs = vec![
            uniform(rng, &[2, cin, 4, 4], -1.0, 1.0),
            uniform(rng, &[cout, cin, 3, 3], -0.5, 0.5),
            uniform(rng, &[cout], 0.5, 1.5),
            uniform(rng, &[cout], -0.5, 0.5),
            uniform(rng, &[cout, cout, 3, 3], -0.5, 0.5),
            uniform(rng, &[cout], 0.5, 1.5),
            uniform(rng, &[cout], -0.5, 0.5),
        ];
        if self.projection {
            inputs.push(uniform(rng, &[cout, cin, 1, 1], -0.5, 0.5));
            inputs.push(uniform(rng, &[cout], 0.5, 1.5));
            inputs.push(uniform(rng, &[cout], -0.5, 0.5));
        }
        Sample {
            inputs,
            aux: projection(rng, 2 * cout * 16),
        }
    }
    fn build<T: Real>(&self, tape: &mut Tape<T>, v: &[Var], aux: &[f64]) -> Result<Var> {
        let empty: Vec<T> = Vec::new();
        let bn = |gamma, beta| {
            Some(BnVars {
                gamma,
                beta,
                running_mean: &empty,
                running_var: &empty,
                batch_stats: true,
            })
        };
        let conv = |weight| ConvVars { weight, bias: None };
        let vars = ResidualVars {
            conv1: conv(v[1]),
            bn1: bn(v[2], v[3]),
            conv2: conv(v[4]),
            bn2: bn(v[5], v[6]),
            proj: if self.projection {
                Some((conv(v[7]), bn(v[8], v[9])))
            } else {
                None
            },
        };
        let stride = if self.projection { 2 } else { 1 };
        let mut stats = Vec::new();
        let y = layers::residual_block(tape, v[0], &vars, stride, "block", &mut stats)?;
        project(tape, y, aux)
    }
}

/// Loss over probabilities in `[0.02, 0.98]`; labels in `aux`.
pub struct Loss {
    pub focal: Option<FocalLossParams>,
}
impl GradCase for Loss {
    fn name(&self) -> String {
        match &self.focal {
            Some(p) => alloc::format!("focal loss(alpha {:?}, gamma {})", p.alpha, p.gamma),
            None => "binary cross-entropy".to_string(),
        }
    }
    fn sample(&self, rng: &mut SeededRng) -> Sample {
        Sample {
            inputs: vec![uniform(rng, &[8, 1], 0.02, 0.98)],
            aux: (0..8)
                .map(|_| if unit_f64(rng) < 0.5 { 0.0 } else { 1.0 })
                .collect(),
        }
    }
    fn build<T: Real>(&self, tape: &mut Tape<T>, v: &[Var], aux: &[f64]) -> Result<Var> {
        let labels: Vec<u8> = aux.iter().map(|&y| y as u8).collect();
        match &self.focal {
            Some(p) => loss::focal_loss_on_tape(tape, v[0], &labels, p),
            None => loss::bce_loss_on_tape(tape, v[0], &labels),
        }
    }
}

/// Focal loss applied to `sigmoid(logits)`, the path the head trains through.
pub struct SigmoidFocal;
impl GradCase for SigmoidFocal {
    fn name(&self) -> String {
        "sigmoid + focal loss".to_string()
    }
    fn sample(&self, rng: &mut SeededRng) -> Sample {
        Sample {
            inputs: vec![uniform(rng, &[8, 1], -4.0, 4.0)],
            aux: (0..8)
                .map(|_| if unit_f64(rng) < 0.5 { 0.0 } else { 1.0 })
                .collect(),
        }
    }
    fn build<T: Real>(&self, tape: &mut Tape<T>, v: &[Var], aux: &[f64]) -> Result<Var> {
        let labels: Vec<u8> = aux.iter().map(|&y| y as u8).collect();
        let p = tape.sigmoid(v[0]);
        loss::focal_loss_on_tape(tape, p, &labels, &FocalLossParams::default())
    }
}

/// Runs every case; one summary per case.
pub fn run_all(n: usize, seed: u64, precision: Precision) -> Result<Vec<Summary>> {
    let focal = FocalLossParams::default();
    let focal_plain = FocalLossParams {
        alpha: None,
        gamma: 2.0,
    };
    Ok(vec![
        run(&Dense, n, seed, precision)?,
        run(&MatMul, n, seed, precision)?,
        run(
            &Conv2d {
                stride: 1,
                padding: 1,
            },
            n,
            seed,
            precision,
        )?,
        run(
            &Conv2d {
                stride: 2,
                padding: 0,
            },
            n,
            seed,
            precision,
        )?,
        run(&MaxPool, n, seed, precision)?,
        run(&GlobalAvgPool, n, seed, precision)?,
        run(&Flatten, n, seed, precision)?,
        run(&Relu, n, seed, precision)?,
        run(&Sigmoid, n, seed, precision)?,
        run(&Dropout, n, seed, precision)?,
        run(&BatchNorm { train: true }, n, seed, precision)?,
        run(&BatchNorm { train: false }, n, seed, precision)?,
        run(&Residual { projection: false }, n, seed, precision)?,
        run(&Residual { projection: true }, n, seed, precision)?,
        run(&Loss { focal: Some(focal) }, n, seed, precision)?,
        run(
            &Loss {
                focal: Some(focal_plain),
            },
            n,
            seed,
            precision,
        )?,
        run(&Loss { focal: None }, n, seed, precision)?,
        run(&SigmoidFocal, n, seed, precision)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_a_few_draws() {
        for s in run_all(3, 11, Precision::F64).unwrap() {
            assert!(s.passed(), "{s:?}");
        }
    }
}
