use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Real, Result};

/// Dense row-major n-dimensional array.
///
/// Tensors are values: every tape operation produces a fresh tensor and never
/// mutates its inputs. Gradients are held by [`crate::Gradients`], keyed by the
/// tape variable that produced the tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting length mismatches, zero extents and
    /// non-finite values.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "shape {shape:?} must have positive extents"
            )));
        }
        let expected = numel(shape);
        if expected != data.len() {
            return Err(Error::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    /// Internal constructor for kernel outputs whose length is known to match.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(shape.to_vec(), vec![T::zero(); numel(shape)])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::raw(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn ones_like(other: &Self) -> Self {
        Self::full(&other.shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::raw(vec![1], vec![value])
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Same data, new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Self::raw(shape.to_vec(), self.data.clone()))
    }

    /// Converts between precisions, e.g. into the `f64` shadow mode.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::raw(
            self.shape.clone(),
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        )
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack<T: Real>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items.first().ok_or(Error::Empty("stack"))?;
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "stack",
                left: first.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::raw(shape, data))
}
