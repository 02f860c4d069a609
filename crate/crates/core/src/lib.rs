//! Numerical core of PneuNet: dense tensors with a reverse-mode tape, the
//! residual CNN used as a frozen backbone, focal-loss training, evaluation
//! metrics and gradient-weighted class activation maps.
//!
//! The crate is `no_std` and only needs `alloc`. Everything that touches the
//! filesystem, the network or a wall clock lives in the `pneunet` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

mod error;
pub use error::{Error, Result};

pub mod cam;
pub mod conv;
pub mod early_stop;
pub mod image;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod real;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

#[cfg(any(test, feature = "test-support"))]
pub mod gradcheck;

pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Probabilities entering a logarithm are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f32 = 1e-7;
