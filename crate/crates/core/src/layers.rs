//! Layer primitives and their declarative specs.
//!
//! A [`LayerSpec`] describes a layer and the parameters it owns; the
//! functions in this module apply a layer to tape variables. They are generic
//! over the scalar type so the same code is exercised by the `f64`
//! gradient checks and the `f32` model.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::conv::BatchStats;
use crate::rng::{unit_f32, SeededRng};
use crate::{Error, Real, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which part of the network a layer belongs to. Freezing acts on groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Backbone,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Dense {
        in_features: usize,
        units: usize,
    },
    Relu,
    Sigmoid,
    Dropout {
        p: f32,
    },
    BatchNorm {
        channels: usize,
    },
    ResidualBlock {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        batchnorm: bool,
    },
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub group: Group,
    #[serde(flatten)]
    pub kind: LayerKind,
}

/// How a parameter tensor is initialized and whether the optimizer owns it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamInit {
    /// Uniform in `±sqrt(6 / fan_in)`.
    KaimingUniform {
        fan_in: usize,
    },
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    XavierUniform {
        fan_in: usize,
        fan_out: usize,
    },
    Zeros,
    Ones,
    /// Batch-norm running statistics: not trained, updated from batches.
    RunningMean,
    RunningVar,
}

impl ParamInit {
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamInit::RunningMean | ParamInit::RunningVar)
    }

    pub fn materialize(self, shape: &[usize], rng: &mut SeededRng) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        let uniform = |bound: f32, rng: &mut SeededRng| -> Vec<f32> {
            (0..n)
                .map(|_| (2.0 * unit_f32(rng) - 1.0) * bound)
                .collect()
        };
        let data = match self {
            ParamInit::KaimingUniform { fan_in } => uniform(libm::sqrtf(6.0 / fan_in as f32), rng),
            ParamInit::XavierUniform { fan_in, fan_out } => {
                uniform(libm::sqrtf(6.0 / (fan_in + fan_out) as f32), rng)
            }
            ParamInit::Zeros | ParamInit::RunningMean => vec![0.0; n],
            ParamInit::Ones | ParamInit::RunningVar => vec![1.0; n],
        };
        Tensor::raw(shape.to_vec(), data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

fn conv_decls(out: &mut Vec<ParamDecl>, prefix: &str, f: usize, c: usize, k: usize, bias: bool) {
    out.push(ParamDecl {
        name: format!("{prefix}.weight"),
        shape: vec![f, c, k, k],
        init: ParamInit::KaimingUniform { fan_in: c * k * k },
    });
    if bias {
        out.push(ParamDecl {
            name: format!("{prefix}.bias"),
            shape: vec![f],
            init: ParamInit::Zeros,
        });
    }
}

fn bn_decls(out: &mut Vec<ParamDecl>, prefix: &str, c: usize) {
    for (suffix, init) in [
        ("gamma", ParamInit::Ones),
        ("beta", ParamInit::Zeros),
        ("running_mean", ParamInit::RunningMean),
        ("running_var", ParamInit::RunningVar),
    ] {
        out.push(ParamDecl {
            name: format!("{prefix}.{suffix}"),
            shape: vec![c],
            init,
        });
    }
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, group: Group, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            group,
            kind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| {
            Err(Error::InvalidArgument(format!(
                "layer {}: {what}",
                self.name
            )))
        };
        match self.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 => {
                bad("channels, kernel and stride must be positive")
            }
            LayerKind::MaxPool2d { window, stride } if window == 0 || stride == 0 => {
                bad("window and stride must be positive")
            }
            LayerKind::Dense { in_features, units } if in_features == 0 || units == 0 => {
                bad("dense dims must be positive")
            }
            LayerKind::Dropout { p } if !(0.0..1.0).contains(&p) => {
                bad("drop probability must be in [0, 1)")
            }
            LayerKind::BatchNorm { channels: 0 } => bad("channels must be positive"),
            LayerKind::ResidualBlock {
                in_channels,
                out_channels,
                stride,
                ..
            } if in_channels == 0 || out_channels == 0 || stride == 0 => {
                bad("channels and stride must be positive")
            }
            _ if self.name.is_empty() => bad("empty name"),
            _ => Ok(()),
        }
    }

    /// Parameters owned by this layer, in canonical order. `output_layer`
    /// selects Xavier initialization for a dense layer feeding a sigmoid.
    pub fn param_decls(&self, output_layer: bool) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        let p = &self.name;
        match self.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => conv_decls(&mut out, p, out_channels, in_channels, kernel, bias),
            LayerKind::Dense { in_features, units } => {
                let init = if output_layer {
                    ParamInit::XavierUniform {
                        fan_in: in_features,
                        fan_out: units,
                    }
                } else {
                    ParamInit::KaimingUniform {
                        fan_in: in_features,
                    }
                };
                out.push(ParamDecl {
                    name: format!("{p}.weight"),
                    shape: vec![in_features, units],
                    init,
                });
                out.push(ParamDecl {
                    name: format!("{p}.bias"),
                    shape: vec![units],
                    init: ParamInit::Zeros,
                });
            }
            LayerKind::BatchNorm { channels } => bn_decls(&mut out, p, channels),
            LayerKind::ResidualBlock {
                in_channels,
                out_channels,
                stride,
                batchnorm,
            } => {
                let bias = !batchnorm;
                conv_decls(
                    &mut out,
                    &format!("{p}.conv1"),
                    out_channels,
                    in_channels,
                    3,
                    bias,
                );
                if batchnorm {
                    bn_decls(&mut out, &format!("{p}.bn1"), out_channels);
                }
                conv_decls(
                    &mut out,
                    &format!("{p}.conv2"),
                    out_channels,
                    out_channels,
                    3,
                    bias,
                );
                if batchnorm {
                    bn_decls(&mut out, &format!("{p}.bn2"), out_channels);
                }
                if needs_projection(in_channels, out_channels, stride) {
                    conv_decls(
                        &mut out,
                        &format!("{p}.proj"),
                        out_channels,
                        in_channels,
                        1,
                        bias,
                    );
                    if batchnorm {
                        bn_decls(&mut out, &format!("{p}.proj_bn"), out_channels);
                    }
                }
            }
            LayerKind::MaxPool2d { .. }
            | LayerKind::GlobalAvgPool
            | LayerKind::Relu
            | LayerKind::Sigmoid
            | LayerKind::Dropout { .. }
            | LayerKind::Flatten => {}
        }
        out
    }
}

pub fn needs_projection(in_channels: usize, out_channels: usize, stride: usize) -> bool {
    in_channels != out_channels || stride > 1
}

/// `x W + b` for `x: [N, d]`, `W: [d, u]`, `b: [u]`.
pub fn dense<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let (sx, sw, sb) = (tape.shape(x), tape.shape(w), tape.shape(b));
    if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
        return Err(Error::ShapeMismatch {
            op: "dense",
            left: sx.to_vec(),
            right: sw.to_vec(),
        });
    }
    let rows = sx[0];
    let xw = tape.matmul(x, w)?;
    let bias = tape.expand_rows(b, rows)?;
    tape.add(xw, bias)
}

/// Bernoulli keep-mask scaled by `1 / (1 - p)` (inverted dropout).
pub fn dropout_mask<T: Real>(shape: &[usize], p: f32, rng: &mut SeededRng) -> Tensor<T> {
    let keep = T::of(1.0 / (1.0 - p as f64));
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if unit_f32(rng) < p { T::zero() } else { keep })
        .collect();
    Tensor::raw(shape.to_vec(), data)
}

/// Inverted dropout: identity in eval mode or when `p == 0`.
pub fn dropout<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: f32,
    mode: Mode,
    rng: &mut SeededRng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "dropout p={p} outside [0, 1)"
        )));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(tape.shape(x), p, rng);
    let m = tape.constant(mask);
    tape.mul(x, m)
}

/// Batch-norm parameters as tape variables plus running statistics.
pub struct BnVars<'a, T> {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: &'a [T],
    pub running_var: &'a [T],
    /// Use batch statistics (training a non-frozen layer).
    pub batch_stats: bool,
}

pub fn batchnorm<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    bn: &BnVars<'_, T>,
) -> Result<(Var, Option<BatchStats>)> {
    if bn.batch_stats {
        let (y, stats) = tape.batchnorm_train(x, bn.gamma, bn.beta)?;
        Ok((y, Some(stats)))
    } else {
        let y = tape.batchnorm_eval(x, bn.gamma, bn.beta, bn.running_mean, bn.running_var)?;
        Ok((y, None))
    }
}

pub struct ConvVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

pub struct ResidualVars<'a, T> {
    pub conv1: ConvVars,
    pub bn1: Option<BnVars<'a, T>>,
    pub conv2: ConvVars,
    pub bn2: Option<BnVars<'a, T>>,
    pub proj: Option<(ConvVars, Option<BnVars<'a, T>>)>,
}

/// Observed batch statistics, keyed by batch-norm parameter prefix.
pub type StatsLog = Vec<(String, BatchStats)>;

#[allow(clippy::too_many_arguments)]
fn conv_bn<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    conv: &ConvVars,
    stride: usize,
    padding: usize,
    bn: Option<&BnVars<'_, T>>,
    stats_key: impl FnOnce() -> String,
    stats: &mut StatsLog,
) -> Result<Var> {
    let y = tape.conv2d(x, conv.weight, conv.bias, stride, padding)?;
    match bn {
        Some(bn) => {
            let (y, s) = batchnorm(tape, y, bn)?;
            if let Some(s) = s {
                stats.push((stats_key(), s));
            }
            Ok(y)
        }
        None => Ok(y),
    }
}

/// `relu(F(x) + skip(x))` with `F = conv3x3(stride) -> bn -> relu -> conv3x3 -> bn`
/// and `skip` the identity or a strided 1x1 projection (+ bn).
pub fn residual_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &ResidualVars<'_, T>,
    stride: usize,
    name: &str,
    stats: &mut StatsLog,
) -> Result<Var> {
    let h = conv_bn(
        tape,
        x,
        &vars.conv1,
        stride,
        1,
        vars.bn1.as_ref(),
        || format!("{name}.bn1"),
        stats,
    )?;
    let h = tape.relu(h);
    let h = conv_bn(
        tape,
        h,
        &vars.conv2,
        1,
        1,
        vars.bn2.as_ref(),
        || format!("{name}.bn2"),
        stats,
    )?;
    let skip = match &vars.proj {
        Some((conv, bn)) => conv_bn(
            tape,
            x,
            conv,
            stride,
            0,
            bn.as_ref(),
            || format!("{name}.proj_bn"),
            stats,
        )?,
        None => x,
    };
    if tape.shape(h) != tape.shape(skip) {
        return Err(Error::ShapeMismatch {
            op: "residual skip",
            left: tape.shape(h).to_vec(),
            right: tape.shape(skip).to_vec(),
        });
    }
    let sum = tape.add(h, skip)?;
    Ok(tape.relu(sum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{purpose, stream};

    fn t(shape: &[usize], v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = dense(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = tape.constant(t(&[1], &[0.5]));
        let y = dense(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.5]);

        let w = tape.constant(t(&[3, 1], &[1.0, 1.0, 1.0]));
        assert!(dense(&mut tape, x, w, b).is_err());
    }

    #[test]
    fn relu_example() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = stream(3, purpose::DROPOUT, 0);
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(dropout(&mut tape, x, 0.5, Mode::Eval, &mut rng).unwrap(), x);
        assert_eq!(
            dropout(&mut tape, x, 0.0, Mode::Train, &mut rng).unwrap(),
            x
        );
        assert_eq!(dropout(&mut tape, x, 0.0, Mode::Eval, &mut rng).unwrap(), x);
        assert!(dropout(&mut tape, x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(dropout(&mut tape, x, -0.1, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = stream(42, purpose::DROPOUT, 0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[10_000], 1.0f32));
        let y = dropout(&mut tape, x, 0.5, Mode::Train, &mut rng).unwrap();
        let out = tape.value(y);
        let mean = out.sum() / 10_000.0;
        assert!((0.95..=1.05).contains(&mean), "mean {mean}");
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn spec_validation() {
        let ok = LayerSpec::new("d", Group::Head, LayerKind::Dropout { p: 0.5 });
        assert!(ok.validate().is_ok());
        let bad = LayerSpec::new("d", Group::Head, LayerKind::Dropout { p: 1.0 });
        assert!(bad.validate().is_err());
        let bad = LayerSpec::new(
            "c",
            Group::Backbone,
            LayerKind::Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel: 3,
                stride: 0,
                padding: 0,
                bias: true,
            },
        );
        assert!(bad.validate().is_err());
    }

    fn zero_block(c: usize, tape: &mut Tape<f32>) -> ResidualVars<'static, f32> {
        let w1 = tape.constant(Tensor::zeros(&[c, c, 3, 3]));
        let b1 = tape.constant(Tensor::zeros(&[c]));
        let w2 = tape.constant(Tensor::zeros(&[c, c, 3, 3]));
        let b2 = tape.constant(Tensor::zeros(&[c]));
        ResidualVars {
            conv1: ConvVars {
                weight: w1,
                bias: Some(b1),
            },
            bn1: None,
            conv2: ConvVars {
                weight: w2,
                bias: Some(b2),
            },
            bn2: None,
            proj: None,
        }
    }

    #[test]
    fn residual_with_zero_weights_is_relu() {
        let mut tape = Tape::new();
        let vals = [1.0, -2.0, 0.5, -0.25, 3.0, 0.0, -1.0, 2.0];
        let x = tape.constant(t(&[1, 2, 2, 2], &vals));
        let vars = zero_block(2, &mut tape);
        let y = residual_block(&mut tape, x, &vars, 1, "b", &mut Vec::new()).unwrap();
        let expect: Vec<f32> = vals.iter().map(|&v| v.max(0.0)).collect();
        assert_eq!(tape.value(y).data(), &expect[..]);

        let z = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let y = residual_block(&mut tape, z, &vars, 1, "b", &mut Vec::new()).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    /// Scalar re-evaluation of a 1-channel 2x2 block with unit 3x3 kernels and
    /// no batch norm. With padding 1, every output of a 3x3 all-ones kernel
    /// over a 2x2 map sees all four pixels, so conv(x) = sum(x) everywhere.
    #[test]
    fn residual_hand_evaluated_case() {
        let x = [1.0f32, -2.0, 0.5, 3.0];
        let sum_x: f32 = x.iter().sum();
        let h1 = (sum_x + 0.1f32).max(0.0);
        let conv2 = 4.0 * h1 - 0.2;
        let expect: Vec<f32> = x.iter().map(|&v| (conv2 + v).max(0.0)).collect();

        let mut tape = Tape::new();
        let xv = tape.constant(t(&[1, 1, 2, 2], &x));
        let w1 = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b1 = tape.constant(t(&[1], &[0.1]));
        let w2 = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b2 = tape.constant(t(&[1], &[-0.2]));
        let vars = ResidualVars {
            conv1: ConvVars {
                weight: w1,
                bias: Some(b1),
            },
            bn1: None,
            conv2: ConvVars {
                weight: w2,
                bias: Some(b2),
            },
            bn2: None,
            proj: None,
        };
        let y = residual_block(&mut tape, xv, &vars, 1, "b", &mut Vec::new()).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn residual_rejects_mismatched_skip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f32>::zeros(&[1, 2, 4, 4]));
        let w1 = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let w2 = tape.constant(Tensor::zeros(&[3, 3, 3, 3]));
        let vars = ResidualVars {
            conv1: ConvVars {
                weight: w1,
                bias: None,
            },
            bn1: None,
            conv2: ConvVars {
                weight: w2,
                bias: None,
            },
            bn2: None,
            proj: None,
        };
        assert!(residual_block(&mut tape, x, &vars, 1, "b", &mut Vec::new()).is_err());
    }
}
