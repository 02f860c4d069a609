//! Spatial kernels on `[N, C, H, W]` activations: convolution (as
//! cross-correlation, no kernel flip), max pooling, global average pooling
//! and batch normalization, with their tape bindings.

use alloc::vec;
use alloc::vec::Vec;

use crate::tape::{gemm_acc, gemm_at_acc, gemm_bt_acc, Op};
use crate::{Error, Real, Result, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (f, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if c != kc {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d kernel larger than padded input",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        Ok(Self {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            filters: f,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel for output position `(oy, ox)` and kernel tap `(ky, kx)`,
    /// or `None` when it falls into the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then_some((y, x))
    }

    fn im2col<T: Real>(&self, image: &[T], col: &mut [T]) {
        let p = self.positions();
        for c in 0..self.in_channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            dst[oy * self.out_w + ox] = match self.source(oy, ox, ky, kx) {
                                Some((y, x)) => plane[y * self.width + x],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], image: &mut [T]) {
        let p = self.positions();
        for c in 0..self.in_channels {
            let base = c * self.height * self.width;
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                                let i = base + y * self.width + x;
                                image[i] = image[i] + src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    geom: &ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (pk, p) = (geom.patch(), geom.positions());
    let in_size = geom.in_channels * geom.height * geom.width;
    let out_size = geom.filters * p;
    let mut out = vec![T::zero(); geom.batch * out_size];
    let mut col = vec![T::zero(); pk * p];
    for n in 0..geom.batch {
        geom.im2col(&input[n * in_size..(n + 1) * in_size], &mut col);
        let dst = &mut out[n * out_size..(n + 1) * out_size];
        if let Some(b) = bias {
            for (f, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(b[f]);
            }
        }
        gemm_acc(geom.filters, pk, p, kernel, &col, dst);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    geom: &ConvGeom,
    input: &[T],
    kernel: &[T],
    dout: &[T],
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let (pk, p) = (geom.patch(), geom.positions());
    let in_size = geom.in_channels * geom.height * geom.width;
    let out_size = geom.filters * p;
    let mut dinput = want_input.then(|| vec![T::zero(); geom.batch * in_size]);
    let mut dkernel = want_kernel.then(|| vec![T::zero(); geom.filters * pk]);
    let mut dbias = want_bias.then(|| vec![T::zero(); geom.filters]);
    let mut col = vec![T::zero(); pk * p];
    for n in 0..geom.batch {
        let g = &dout[n * out_size..(n + 1) * out_size];
        if let Some(db) = dbias.as_mut() {
            for (f, chunk) in g.chunks(p).enumerate() {
                db[f] = chunk.iter().fold(db[f], |acc, &v| acc + v);
            }
        }
        if let Some(dk) = dkernel.as_mut() {
            geom.im2col(&input[n * in_size..(n + 1) * in_size], &mut col);
            gemm_bt_acc(geom.filters, p, pk, g, &col, dk);
        }
        if let Some(di) = dinput.as_mut() {
            col.fill(T::zero());
            gemm_at_acc(geom.filters, pk, p, kernel, g, &mut col);
            geom.col2im(&col, &mut di[n * in_size..(n + 1) * in_size]);
        }
    }
    ConvGrads {
        input: dinput,
        kernel: dkernel,
        bias: dbias,
    }
}

pub(crate) struct BnGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Per-channel statistics over `(N, H, W)`.
fn channel_stats<T: Real>(shape: &[usize], x: &[T]) -> (Vec<T>, Vec<T>) {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = T::of((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * hw;
            s = x[off..off + hw].iter().fold(s, |a, &v| a + v);
        }
        let m = s / count;
        let mut sq = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * hw;
            sq = x[off..off + hw]
                .iter()
                .fold(sq, |a, &v| a + (v - m) * (v - m));
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    (mean, var)
}

pub(crate) fn batchnorm_backward<T: Real>(
    shape: &[usize],
    dout: &[T],
    normalized: &[T],
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
) -> BnGrads<T> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = T::of((n * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dbeta[ch] = dbeta[ch] + dout[i];
                dgamma[ch] = dgamma[ch] + dout[i] * normalized[i];
            }
        }
    }
    let mut dinput = vec![T::zero(); dout.len()];
    for ch in 0..c {
        let scale = gamma[ch] * inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dinput[i] = if batch_stats {
                    // dx = gamma / sigma * (dy - mean(dy) - xhat * mean(dy * xhat))
                    scale * (dout[i] - dbeta[ch] / count - normalized[i] * dgamma[ch] / count)
                } else {
                    scale * dout[i]
                };
            }
        }
    }
    BnGrads {
        input: dinput,
        gamma: dgamma,
        beta: dbeta,
    }
}

/// Batch statistics observed by a train-mode batch-norm call, used to update
/// the running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
}

impl<T: Real> Tape<T> {
    /// 2-D cross-correlation with zero padding.
    /// Output spatial size is `floor((H + 2p - kh) / stride) + 1`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.filters] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: self.shape(b).to_vec(),
                    right: vec![geom.filters],
                });
            }
        }
        let out = conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let rg = self.tracks(input) || self.tracks(kernel) || bias.is_some_and(|b| self.tracks(b));
        let shape = vec![geom.batch, geom.filters, geom.out_h, geom.out_w];
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            Tensor::raw(shape, out),
            rg,
        ))
    }

    /// Max pooling. Ties route the gradient to the first maximal element in
    /// row-major order.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let t = self.value(input);
        let s = t.shape();
        if s.len() != 4 || window == 0 || stride == 0 || s[2] < window || s[3] < window {
            return Err(Error::InvalidArgument(alloc::format!(
                "maxpool2d window {window} stride {stride} on input {s:?}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let x = t.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = base + (oy * stride + dy) * w + ox * stride + dx;
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.tracks(input);
        Ok(self.push(
            Op::MaxPool2d { input, argmax },
            Tensor::raw(vec![n, c, oh, ow], out),
            rg,
        ))
    }

    /// Per-channel spatial mean, `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::InvalidArgument(alloc::format!(
                "global_avg_pool needs a 4-D input, got {s:?}"
            )));
        }
        let hw = s[2] * s[3];
        let scale = T::one() / T::of(hw as f64);
        let out: Vec<T> = t
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * scale)
            .collect();
        let rg = self.tracks(input);
        Ok(self.push(
            Op::GlobalAvgPool(input),
            Tensor::raw(vec![s[0], s[1]], out),
            rg,
        ))
    }

    /// Batch normalization with batch statistics (training). Returns the
    /// output and the observed statistics.
    pub fn batchnorm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats)> {
        let s = self.shape(input).to_vec();
        self.check_bn(&s, gamma, beta)?;
        if s[0] < 2 {
            return Err(Error::InvalidArgument(
                "batchnorm in train mode needs a batch of at least 2".into(),
            ));
        }
        let (mean, var) = channel_stats(&s, self.value(input).data());
        let eps = T::of(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let m = (s[0] * s[2] * s[3]) as f64;
        let stats = BatchStats {
            mean: mean.iter().map(|v| v.as_f64()).collect(),
            var: var.iter().map(|v| v.as_f64() * m / (m - 1.0)).collect(),
        };
        let v = self.bn_apply(input, gamma, beta, &mean, inv_std, true);
        Ok((v, stats))
    }

    /// Batch normalization with fixed statistics (evaluation, frozen layers).
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var> {
        let s = self.shape(input).to_vec();
        self.check_bn(&s, gamma, beta)?;
        if running_mean.len() != s[1] || running_var.len() != s[1] {
            return Err(Error::InvalidArgument(
                "batchnorm running stats length".into(),
            ));
        }
        let eps = T::of(BN_EPS);
        let inv_std = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        Ok(self.bn_apply(input, gamma, beta, running_mean, inv_std, false))
    }

    fn check_bn(&self, s: &[usize], gamma: Var, beta: Var) -> Result<()> {
        if s.len() != 4 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                left: s.to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        Ok(())
    }

    fn bn_apply(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        batch_stats: bool,
    ) -> Var {
        let t = self.value(input);
        let s = t.shape().to_vec();
        let (c, hw) = (s[1], s[2] * s[3]);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut normalized = Vec::with_capacity(t.len());
        let mut out = Vec::with_capacity(t.len());
        for (plane, chunk) in t.data().chunks(hw).enumerate() {
            let ch = plane % c;
            for &v in chunk {
                let xh = (v - mean[ch]) * inv_std[ch];
                normalized.push(xh);
                out.push(g[ch] * xh + b[ch]);
            }
        }
        let rg = self.tracks(input) || self.tracks(gamma) || self.tracks(beta);
        self.push(
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            },
            Tensor::raw(s, out),
            rg,
        )
    }
}
