use serde::{Deserialize, Serialize};

use crate::autodiff::{eval_affine_coefficients, BatchStats, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BN_EPS: f32 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Standalone batch-normalization layer over `C` channels.
///
/// In train mode the layer normalizes with batch statistics and folds them
/// into the running estimates with `running ← (1−momentum)·running +
/// momentum·batch`. In eval mode it is the fixed affine map
/// `γ(z−μ)/√(σ²+ε) + β`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
    pub mode: Mode,
}

impl BatchNormLayer {
    /// `γ=1, β=0`, running statistics `(0, 1)`, train mode.
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: DEFAULT_BN_EPS,
            momentum: DEFAULT_BN_MOMENTUM,
            mode: Mode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::InvalidConfig("batch norm vectors differ in length".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig(format!("batch norm eps {} must be > 0", self.eps)));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "batch norm momentum {} outside (0, 1]",
                self.momentum
            )));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidConfig("negative running variance".into()));
        }
        Ok(())
    }

    /// Applies the layer to `x: [N, C, ...]`. In train mode the running
    /// statistics are updated only when `update_stats` is set.
    pub fn forward(&mut self, x: &Tensor, update_stats: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::new(vec![self.channels()], self.gamma.clone())?);
        let b = tape.constant(Tensor::new(vec![self.channels()], self.beta.clone())?);
        let y = match self.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(xv, g, b, self.eps)?;
                if update_stats {
                    self.absorb(&stats);
                }
                y
            }
            Mode::Eval => tape.batch_norm_eval(xv, g, b, &self.running_mean, &self.running_var, self.eps)?,
        };
        Ok(tape.value(y).clone())
    }

    /// Exponential-moving-average update of the running statistics.
    pub fn absorb(&mut self, stats: &BatchStats) {
        update_running(&mut self.running_mean, &stats.mean, self.momentum);
        update_running(&mut self.running_var, &stats.var, self.momentum);
    }

    /// Eval-mode behaviour as one per-channel affine map `(m, b)`.
    pub fn affine(&self) -> (Vec<f32>, Vec<f32>) {
        eval_affine_coefficients(
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.eps,
        )
    }
}

pub(crate) fn update_running(running: &mut [f32], batch: &[f32], momentum: f32) {
    for (r, b) in running.iter_mut().zip(batch) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}
