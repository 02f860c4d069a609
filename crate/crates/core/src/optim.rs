//! RMSProp: `v <- rho * v + (1 - rho) * g^2`, `theta <- theta - lr * g / (sqrt(v) + eps)`.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::ModelGraph;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f32,
    pub rho: f32,
    pub epsilon: f32,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            rho: 0.9,
            epsilon: 1e-7,
        }
    }
}

/// Per-parameter squared-gradient averages, only for trainable parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RmsPropState {
    pub config: RmsPropConfig,
    accumulators: BTreeMap<usize, Vec<f32>>,
}

impl RmsPropState {
    pub fn new(config: RmsPropConfig) -> Self {
        Self {
            config,
            accumulators: BTreeMap::new(),
        }
    }

    pub fn accumulator(&self, param_index: usize) -> Option<&[f32]> {
        self.accumulators.get(&param_index).map(Vec::as_slice)
    }

    /// Updates a single parameter tensor in place.
    pub fn update(&mut self, param_index: usize, theta: &mut [f32], grad: &[f32]) {
        let RmsPropConfig { lr, rho, epsilon } = self.config;
        let v = self
            .accumulators
            .entry(param_index)
            .or_insert_with(|| vec![0.0; theta.len()]);
        for ((t, vi), &g) in theta.iter_mut().zip(v.iter_mut()).zip(grad) {
            *vi = rho * *vi + (1.0 - rho) * g * g;
            *t -= lr * g / (libm::sqrtf(*vi) + epsilon);
        }
    }

    /// One step over every trainable parameter of `model`. `grads` maps
    /// parameter index to gradient; frozen parameters and buffers are left
    /// untouched.
    pub fn step(
        &mut self,
        model: &mut ModelGraph,
        grads: &BTreeMap<usize, Tensor<f32>>,
    ) -> Result<()> {
        let trainable: Vec<usize> = model
            .params()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| i)
            .collect();
        for &i in &trainable {
            if !grads.contains_key(&i) {
                return Err(Error::MissingGradient(
                    model.params().by_index(i).name.clone(),
                ));
            }
        }
        for i in trainable {
            let g = &grads[&i];
            let t = model.params_mut().tensor_mut(i);
            let mut data = t.data().to_vec();
            self.update(i, &mut data, g.data());
            *t = Tensor::from_vec(t.shape(), data)?;
        }
        Ok(())
    }
}
