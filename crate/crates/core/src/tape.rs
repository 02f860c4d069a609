//! Wengert tape: reverse-mode differentiation by recording operations.
//!
//! Each operation appends a node holding its output value, its inputs and any
//! state the local gradient needs. Nodes are appended in evaluation order, so
//! the node list is already topologically sorted and `backward` is a single
//! reverse sweep.
//!
//! A node tracks gradients only when one of its inputs does. Frozen
//! parameters therefore cost nothing in the backward pass unless a caller
//! explicitly asks for them, either by registering them with
//! [`Tape::param`] or by inserting a [`Tape::watch`] point, which is how
//! Grad-CAM obtains the gradient at an interior feature map.

use alloc::vec;
use alloc::vec::Vec;

use crate::conv;
use crate::tensor::numel;
use crate::{Error, Real, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Watch(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    Log(Var),
    Exp(Var),
    Pow(Var, T),
    Clamp(Var, T, T),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Matmul(Var, Var),
    ExpandRows(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: conv::ConvGeom,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], retrievable for any recorded
/// variable that tracked gradients, leaf or interior.
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn contains(&self, var: Var) -> bool {
        self.get(var).is_some()
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn map<T: Real>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::raw(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::raw(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

/// `c[m,n] += a[m,k] * b[k,n]`, row-major.
pub(crate) fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij = *c_ij + a_ip * b_pj;
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`.
pub(crate) fn gemm_bt_acc<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot = a_row
                .iter()
                .zip(b_row)
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            c[i * k + p] = c[i * k + p] + dot;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn gemm_at_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (c_pj, &b_ij) in c_row.iter_mut().zip(b_row) {
                *c_pj = *c_pj + a_ip * b_ij;
            }
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; gradient tracking follows the tensor's own flag.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.push(Op::Leaf, tensor, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(Op::Leaf, tensor, false)
    }

    /// Leaf that always receives a gradient.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.push(Op::Leaf, tensor, true)
    }

    /// Identity that forces gradient tracking from this point on. The
    /// gradient stops here: it is not propagated into `x`'s history unless
    /// `x` itself tracks gradients.
    pub fn watch(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(Op::Watch(x), value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let out = zip(ta, tb, f);
        let rg = self.tracks(a) || self.tracks(b);
        Ok(self.push(op, out, rg))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = map(self.value(x), f);
        let rg = self.tracks(x);
        self.push(op, out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// Natural logarithm. Inputs must be strictly positive; callers clamp
    /// probabilities to `[PROB_EPS, 1 - PROB_EPS]` first.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Domain("log"));
        }
        Ok(self.unary(x, Op::Log(x), |v| v.ln()))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = map(self.value(x), |v| v.exp());
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("exp overflow"));
        }
        let rg = self.tracks(x);
        Ok(self.push(Op::Exp(x), out, rg))
    }

    /// `x^e` for a constant exponent. Negative bases are rejected unless the
    /// exponent is an integer.
    pub fn pow(&mut self, x: Var, e: T) -> Result<Var> {
        let integral = e.fract() == T::zero();
        if !integral && self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(Error::Domain("pow of negative base"));
        }
        Ok(self.unary(x, Op::Pow(x, e), |v| v.powf(e)))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping applied.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            Op::Relu(x),
            |v| if v > T::zero() { v } else { T::zero() },
        )
    }

    /// Logistic function; the output is clamped into the probability range
    /// so that a downstream `log` is always defined.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let lo = T::of(crate::PROB_EPS as f64);
        let hi = T::one() - lo;
        self.unary(x, Op::Sigmoid(x), |v| {
            (T::one() / (T::one() + (-v).exp())).max(lo).min(hi)
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.tracks(x);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / T::of(t.len() as f64);
        let rg = self.tracks(x);
        self.push(Op::Mean(x), Tensor::scalar(m), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(m, k, n, ta.data(), tb.data(), &mut out);
        let rg = self.tracks(a) || self.tracks(b);
        Ok(self.push(Op::Matmul(a, b), Tensor::raw(vec![m, n], out), rg))
    }

    /// Repeats a vector `[u]` into `rows` identical rows `[rows, u]`.
    pub fn expand_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 1 || rows == 0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "expand_rows needs a vector and rows >= 1, got {:?} x {rows}",
                t.shape()
            )));
        }
        let u = t.len();
        let mut out = Vec::with_capacity(rows * u);
        for _ in 0..rows {
            out.extend_from_slice(t.data());
        }
        let rg = self.tracks(x);
        Ok(self.push(Op::ExpandRows(x), Tensor::raw(vec![rows, u], out), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.tracks(x);
        Ok(self.push(Op::Reshape(x), out, rg))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape: a second call
    /// fails with [`Error::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.tracks(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::raw(node.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.tracks(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Vec<T>>],
        v: Var,
        f: impl FnOnce(&Tensor<T>) -> Vec<T>,
    ) {
        if self.tracks(v) {
            let contrib = f(self.value(v));
            self.accumulate(grads, v, contrib);
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let ew = |xs: &[T], f: &dyn Fn(T, T) -> T| -> Vec<T> {
            g.iter().zip(xs).map(|(&gi, &xi)| f(gi, xi)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Watch(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |_| ew(tb.data(), &|gi, y| gi * y));
                self.accumulate_with(grads, *b, |_| ew(ta.data(), &|gi, x| gi * x));
            }
            Op::Neg(x) => self.accumulate(grads, *x, g.iter().map(|&v| -v).collect()),
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.iter().map(|&v| v * c).collect());
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Log(x) => self.accumulate_with(grads, *x, |t| ew(t.data(), &|gi, v| gi / v)),
            Op::Exp(x) => {
                self.accumulate_with(grads, *x, |_| ew(out.data(), &|gi, y| gi * y));
            }
            Op::Pow(x, e) => {
                let e = *e;
                self.accumulate_with(grads, *x, |t| {
                    if e == T::zero() {
                        vec![T::zero(); t.len()]
                    } else {
                        ew(t.data(), &|gi, v| gi * e * v.powf(e - T::one()))
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.accumulate_with(grads, *x, |t| {
                    ew(t.data(), &|gi, v| {
                        if v < lo || v > hi {
                            T::zero()
                        } else {
                            gi
                        }
                    })
                });
            }
            Op::Relu(x) => self.accumulate_with(grads, *x, |t| {
                ew(t.data(), &|gi, v| {
                    if v > T::zero() {
                        gi
                    } else {
                        T::zero()
                    }
                })
            }),
            Op::Sigmoid(x) => self.accumulate_with(grads, *x, |_| {
                ew(out.data(), &|gi, s| gi * s * (T::one() - s))
            }),
            Op::Sum(x) => self.accumulate_with(grads, *x, |t| vec![g[0]; t.len()]),
            Op::Mean(x) => {
                self.accumulate_with(grads, *x, |t| vec![g[0] / T::of(t.len() as f64); t.len()])
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = dC * B^T, dB = A^T * dC
                self.accumulate_with(grads, *a, |_| {
                    let mut da = vec![T::zero(); m * k];
                    gemm_bt_acc(m, n, k, g, tb.data(), &mut da);
                    da
                });
                self.accumulate_with(grads, *b, |_| {
                    let mut db = vec![T::zero(); k * n];
                    gemm_at_acc(m, k, n, ta.data(), g, &mut db);
                    db
                });
            }
            Op::ExpandRows(x) => self.accumulate_with(grads, *x, |t| {
                let u = t.len();
                let mut gx = vec![T::zero(); u];
                for row in g.chunks(u) {
                    for (acc, &v) in gx.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                gx
            }),
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let want_input = self.tracks(*input);
                let want_kernel = self.tracks(*kernel);
                let want_bias = bias.is_some_and(|b| self.tracks(b));
                let back = conv::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    want_input,
                    want_kernel,
                    want_bias,
                );
                if let Some(d) = back.input {
                    self.accumulate(grads, *input, d);
                }
                if let Some(d) = back.kernel {
                    self.accumulate(grads, *kernel, d);
                }
                if let (Some(b), Some(d)) = (bias, back.bias) {
                    self.accumulate(grads, *b, d);
                }
            }
            Op::MaxPool2d { input, argmax } => self.accumulate_with(grads, *input, |t| {
                let mut gx = vec![T::zero(); t.len()];
                for (&src, &gi) in argmax.iter().zip(g) {
                    gx[src] = gx[src] + gi;
                }
                gx
            }),
            Op::GlobalAvgPool(x) => self.accumulate_with(grads, *x, |t| {
                let hw = numel(&t.shape()[2..]);
                let scale = T::one() / T::of(hw as f64);
                g.iter()
                    .flat_map(|&gi| core::iter::repeat_n(gi * scale, hw))
                    .collect()
            }),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let shape = self.value(*input).shape();
                let back = conv::batchnorm_backward(
                    shape,
                    g,
                    normalized,
                    inv_std,
                    self.value(*gamma).data(),
                    *batch_stats,
                );
                self.accumulate(grads, *input, back.input);
                self.accumulate(grads, *gamma, back.gamma);
                self.accumulate(grads, *beta, back.beta);
            }
        }
    }
}
