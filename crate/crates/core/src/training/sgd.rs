use std::collections::HashMap;

use super::FreezeMask;
use crate::error::{Error, Result};
use crate::nn::Model;

/// SGD with heavy-ball momentum and L2 weight decay.
///
/// `v ← momentum·v + grad + wd·param`, `param ← param − lr·v`, applied to
/// trainable arrays only. Batch-norm γ and β are exempt from weight decay.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: HashMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Applies one update from the gradients stored on the model's arrays.
    /// Frozen arrays are not touched, whatever their gradient.
    pub fn step(&mut self, model: &mut Model, mask: &FreezeMask, lr: f32) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {lr} must be > 0")));
        }
        for a in model.arrays_mut() {
            if a.kind.is_statistic() || !mask.is_trainable(&a.name) {
                continue;
            }
            let grad = a
                .tensor
                .grad()
                .ok_or_else(|| Error::MissingGrad(a.name.clone()))?
                .to_vec();
            let wd = if a.kind.is_bn_param() { 0.0 } else { self.weight_decay };
            let v = self
                .velocity
                .entry(a.name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for ((p, vi), g) in a.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vi = self.momentum * *vi + g + wd * *p;
                *p -= lr * *vi;
            }
        }
        Ok(())
    }
}
