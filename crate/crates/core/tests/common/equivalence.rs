//! Randomized comparisons of convolution and eval-mode batch norm against
//! the nested-loop and explicit-affine oracles.

use bnrobust::autodiff::Tape;
use bnrobust::nn::{BatchNormLayer, Mode};
use bnrobust::Tensor;
use rand::Rng;

use super::*;

pub const EQUIV_TOL: f64 = 1e-6;

/// Largest absolute deviation seen over a batch of randomized cases.
#[derive(Debug, Clone)]
pub struct Equivalence {
    pub cases: usize,
    pub max_abs_diff: f64,
}

/// `cases` random convolutions (shapes, stride, padding, values) computed
/// by the tape and by the nested-loop oracle.
pub fn conv_cases(cases: usize, seed: u64) -> Equivalence {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (n, c, f) = (r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4));
        let (h, w) = (r.random_range(1..=7), r.random_range(1..=7));
        let kh = r.random_range(1..=3);
        let kw = r.random_range(1..=3);
        let pad = r.random_range(0..=2);
        let stride = r.random_range(1..=2);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            continue;
        }
        let x = Arr::from_f32(&[n, c, h, w], &uniform_vec(&mut r, n * c * h * w, 0.0, 1.0).iter().map(|&v| v as f32).collect::<Vec<_>>());
        let std = (2.0 / (c * kh * kw) as f64).sqrt();
        let k = Arr::from_f32(
            &[f, c, kh, kw],
            &uniform_vec(&mut r, f * c * kh * kw, -std, std).iter().map(|&v| v as f32).collect::<Vec<_>>(),
        );
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(x.shape.clone(), x.to_f32()).unwrap());
        let kv = tape.constant(Tensor::new(k.shape.clone(), k.to_f32()).unwrap());
        let y = tape.conv2d(xv, kv, stride, pad).unwrap();
        let want = conv2d(&x, &k, stride, pad);
        assert_eq!(tape.value(y).shape(), want.shape.as_slice());
        let got: Vec<f64> = tape.value(y).data().iter().map(|&v| v as f64).collect();
        worst = worst.max(max_abs_diff(&got, &want.data));
    }
    Equivalence {
        cases,
        max_abs_diff: worst,
    }
}

/// `cases` random eval-mode batch-norm layers compared with the per-channel
/// affine map `m·z + b`, `m = γ/√(σ²+ε)`, `b = β − γμ/√(σ²+ε)` in `f64`.
pub fn bn_eval_cases(cases: usize, seed: u64) -> Equivalence {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let c = r.random_range(1..=8);
        let (n, h, w) = (r.random_range(1..=4), r.random_range(1..=5), r.random_range(1..=5));
        let f32v = |r: &mut ChaCha8Rng, k: usize, lo: f64, hi: f64| -> Vec<f32> {
            uniform_vec(r, k, lo, hi).iter().map(|&v| v as f32).collect()
        };
        let mut layer = BatchNormLayer::new(c);
        layer.gamma = f32v(&mut r, c, -1.5, 1.5);
        layer.beta = f32v(&mut r, c, -1.0, 1.0);
        layer.running_mean = f32v(&mut r, c, -1.0, 1.0);
        layer.running_var = f32v(&mut r, c, 0.05, 3.0);
        layer.mode = Mode::Eval;
        let x = f32v(&mut r, n * c * h * w, -2.0, 2.0);
        let y = layer.forward(&Tensor::new(vec![n, c, h, w], x.clone()).unwrap(), true).unwrap();
        let eps = layer.eps as f64;
        let s = h * w;
        for (i, (&xi, &yi)) in x.iter().zip(y.data()).enumerate() {
            let ch = (i / s) % c;
            let m = layer.gamma[ch] as f64 / (layer.running_var[ch] as f64 + eps).sqrt();
            let b = layer.beta[ch] as f64 - m * layer.running_mean[ch] as f64;
            worst = worst.max((yi as f64 - (m * xi as f64 + b)).abs());
        }
    }
    Equivalence {
        cases,
        max_abs_diff: worst,
    }
}
