//! Batch normalization over the channel axis of `[N, C, ...]` tensors.

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel batch statistics measured by a train-mode forward.
/// `var` is the biased estimate (divided by the number of values).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

pub(super) struct NormGrads {
    pub dx: Option<Vec<f32>>,
    pub dgamma: Vec<f32>,
    pub dbeta: Vec<f32>,
}

/// Channel-wise affine map `m·z + b` equivalent to eval-mode batch norm:
/// `m = γ/√(σ²+ε)`, `b = β − γμ/√(σ²+ε)`. Evaluated in `f64`, rounded once.
pub fn eval_affine_coefficients(
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> (Vec<f32>, Vec<f32>) {
    gamma
        .iter()
        .zip(beta)
        .zip(mean.iter().zip(var))
        .map(|((&g, &b), (&mu, &v))| {
            let scale = g as f64 / (v as f64 + eps as f64).sqrt();
            (scale as f32, (b as f64 - scale * mu as f64) as f32)
        })
        .unzip()
}

fn layout(x: &Tensor, channels: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() < 2 || s[1] != channels {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            lhs: s.to_vec(),
            rhs: vec![channels],
        });
    }
    Ok((s[0], s[2..].iter().product()))
}

fn check_params(tape: &Tape, gamma: Var, beta: Var) -> Result<usize> {
    let c = tape.value(gamma).numel();
    if tape.value(beta).numel() != c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm params",
            lhs: tape.value(gamma).shape().to_vec(),
            rhs: tape.value(beta).shape().to_vec(),
        });
    }
    Ok(c)
}

pub(super) fn batch_norm_train_backward(
    x: &Tensor,
    gamma: &[f32],
    mean: &[f32],
    inv_std: &[f32],
    dy: &[f32],
    want_dx: bool,
) -> NormGrads {
    let c = gamma.len();
    let (n, s) = (x.shape()[0], x.numel() / (x.shape()[0] * c));
    let m = (n * s) as f64;
    let xd = x.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dx = want_dx.then(|| vec![0.0; xd.len()]);
    for ch in 0..c {
        let (mu, is) = (mean[ch], inv_std[ch]);
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                let xhat = ((xd[i] - mu) * is) as f64;
                sum_dy += dy[i] as f64;
                sum_dy_xhat += dy[i] as f64 * xhat;
            }
        }
        dgamma[ch] = sum_dy_xhat as f32;
        dbeta[ch] = sum_dy as f32;
        if let Some(dx) = dx.as_mut() {
            let k = gamma[ch] as f64 * is as f64 / m;
            for b in 0..n {
                let off = (b * c + ch) * s;
                for i in off..off + s {
                    let xhat = ((xd[i] - mu) * is) as f64;
                    dx[i] = (k * (m * dy[i] as f64 - sum_dy - xhat * sum_dy_xhat)) as f32;
                }
            }
        }
    }
    NormGrads { dx, dgamma, dbeta }
}

pub(super) fn batch_norm_eval_backward(
    x: &Tensor,
    gamma: &[f32],
    mean: &[f32],
    inv_std: &[f32],
    dy: &[f32],
    want_dx: bool,
) -> NormGrads {
    let c = gamma.len();
    let (n, s) = (x.shape()[0], x.numel() / (x.shape()[0] * c));
    let xd = x.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dx = want_dx.then(|| vec![0.0; xd.len()]);
    for ch in 0..c {
        let (mu, is) = (mean[ch], inv_std[ch]);
        let scale = gamma[ch] * is;
        let (mut sg, mut sb) = (0.0f64, 0.0f64);
        for b in 0..n {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                sg += (dy[i] * (xd[i] - mu) * is) as f64;
                sb += dy[i] as f64;
                if let Some(dx) = dx.as_mut() {
                    dx[i] = dy[i] * scale;
                }
            }
        }
        dgamma[ch] = sg as f32;
        dbeta[ch] = sb as f32;
    }
    NormGrads { dx, dgamma, dbeta }
}

impl Tape {
    /// Train-mode batch norm: normalizes each channel by the batch mean and
    /// biased variance over all non-channel axes, then applies `γ`, `β`.
    /// Returns the measured statistics alongside the output.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, BatchStats)> {
        let c = check_params(self, gamma, beta)?;
        let xv = self.value(x);
        let (n, s) = layout(xv, c)?;
        if n * s < 2 {
            return Err(Error::BatchTooSmall(n * s));
        }
        let xd = xv.data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        let mut inv_std = vec![0.0f32; c];
        let mut out = vec![0.0f32; xd.len()];
        let m = (n * s) as f64;
        for ch in 0..c {
            let mut sum = 0.0f64;
            for b in 0..n {
                let off = (b * c + ch) * s;
                sum += xd[off..off + s].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mu = sum / m;
            let mut sq = 0.0f64;
            for b in 0..n {
                let off = (b * c + ch) * s;
                sq += xd[off..off + s]
                    .iter()
                    .map(|&v| (v as f64 - mu).powi(2))
                    .sum::<f64>();
            }
            let v = sq / m;
            let is = 1.0 / (v + eps as f64).sqrt();
            mean[ch] = mu as f32;
            var[ch] = v as f32;
            inv_std[ch] = is as f32;
            let (mu, is) = (mean[ch], inv_std[ch]);
            for b in 0..n {
                let off = (b * c + ch) * s;
                for i in off..off + s {
                    out[i] = g[ch] * ((xd[i] - mu) * is) + bt[ch];
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let stats = BatchStats {
            mean: mean.clone(),
            var,
        };
        let var = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            &[x, gamma, beta],
        )?;
        Ok((var, stats))
    }

    /// Eval-mode batch norm with fixed statistics, computed as the
    /// equivalent per-channel affine map.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        let c = check_params(self, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm_eval stats",
                lhs: vec![c],
                rhs: vec![running_mean.len(), running_var.len()],
            });
        }
        let xv = self.value(x);
        let (n, s) = layout(xv, c)?;
        let (scale, shift) = eval_affine_coefficients(
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            eps,
        );
        let xd = xv.data();
        let mut out = vec![0.0f32; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * s;
                for i in off..off + s {
                    out[i] = scale[ch] * xd[i] + shift[ch];
                }
            }
        }
        let inv_std = running_var
            .iter()
            .map(|&v| (1.0 / (v as f64 + eps as f64).sqrt()) as f32)
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            &[x, gamma, beta],
        )
    }
}
