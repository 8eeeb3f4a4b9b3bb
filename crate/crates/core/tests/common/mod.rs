//! Independent `f64` reference implementations used as test oracles.
//!
//! Everything here is written with plain nested loops straight from the
//! textbook definitions, sharing no code with the crate under test.

#![allow(dead_code)]

use bnrobust::nn::{Architecture, Model, ResNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod attack_checks;
pub mod equivalence;
pub mod freeze_checks;
pub mod gradcheck;

pub const BN_EPS: f64 = 1e-5;

/// A dense `f64` array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?}");
        Arr {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Self {
        Arr::new(shape, data.iter().map(|&v| v as f64).collect())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cc, h, w] = self.dims4();
        self.data[((n * cc + c) * h + y) * w + x]
    }

    pub fn dims4(&self) -> [usize; 4] {
        [self.shape[0], self.shape[1], self.shape[2], self.shape[3]]
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d(x: &Arr, k: &Arr, stride: usize, pad: usize) -> Arr {
    let [n, c, h, w] = x.dims4();
    let [f, kc, kh, kw] = k.dims4();
    assert_eq!(c, kc);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * ho * wo];
    for b in 0..n {
        for o in 0..f {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += x.at4(b, ch, y as usize, xx as usize) * k.at4(o, ch, u, v);
                            }
                        }
                    }
                    out[((b * f + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Arr::new(&[n, f, ho, wo], out)
}

/// Values of channel `ch` of an `[N, C, ...]` array.
fn channel_indices(shape: &[usize], ch: usize) -> Vec<usize> {
    let c = shape[1];
    let s: usize = shape[2..].iter().product();
    (0..shape[0])
        .flat_map(|b| (0..s).map(move |p| (b * c + ch) * s + p))
        .collect()
}

/// Batch norm with batch statistics (biased variance); returns the output
/// and the per-channel `(mean, var)`.
pub fn bn_train(x: &Arr, gamma: &[f64], beta: &[f64]) -> (Arr, Vec<f64>, Vec<f64>) {
    let mut out = x.clone();
    let (mut means, mut vars) = (Vec::new(), Vec::new());
    for ch in 0..x.shape[1] {
        let idx = channel_indices(&x.shape, ch);
        let m = idx.iter().map(|&i| x.data[i]).sum::<f64>() / idx.len() as f64;
        let v = idx.iter().map(|&i| (x.data[i] - m).powi(2)).sum::<f64>() / idx.len() as f64;
        for &i in &idx {
            out.data[i] = gamma[ch] * (x.data[i] - m) / (v + BN_EPS).sqrt() + beta[ch];
        }
        means.push(m);
        vars.push(v);
    }
    (out, means, vars)
}

/// Batch norm with fixed statistics, written as the normalization formula.
pub fn bn_eval(x: &Arr, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Arr {
    let mut out = x.clone();
    for ch in 0..x.shape[1] {
        for i in channel_indices(&x.shape, ch) {
            out.data[i] = gamma[ch] * (x.data[i] - mean[ch]) / (var[ch] + BN_EPS).sqrt() + beta[ch];
        }
    }
    out
}

pub fn relu(x: &Arr) -> Arr {
    Arr::new(&x.shape, x.data.iter().map(|&v| v.max(0.0)).collect())
}

pub fn add(a: &Arr, b: &Arr) -> Arr {
    assert_eq!(a.shape, b.shape);
    Arr::new(&a.shape, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

pub fn avg_pool2(x: &Arr) -> Arr {
    let [n, c, h, w] = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let s = x.at4(b, ch, 2 * i, 2 * j)
                        + x.at4(b, ch, 2 * i + 1, 2 * j)
                        + x.at4(b, ch, 2 * i, 2 * j + 1)
                        + x.at4(b, ch, 2 * i + 1, 2 * j + 1);
                    out.push(s / 4.0);
                }
            }
        }
    }
    Arr::new(&[n, c, ho, wo], out)
}

/// Appends zero channels up to `channels`.
pub fn pad_channels(x: &Arr, channels: usize) -> Arr {
    let [n, c, h, w] = x.dims4();
    let mut out = vec![0.0; n * channels * h * w];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..h * w {
                out[(b * channels + ch) * h * w + p] = x.data[(b * c + ch) * h * w + p];
            }
        }
    }
    Arr::new(&[n, channels, h, w], out)
}

pub fn global_avg_pool(x: &Arr) -> Arr {
    let [n, c, h, w] = x.dims4();
    let mut out = Vec::with_capacity(n * c);
    for b in 0..n {
        for ch in 0..c {
            let s: f64 = (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).map(|(i, j)| x.at4(b, ch, i, j)).sum();
            out.push(s / (h * w) as f64);
        }
    }
    Arr::new(&[n, c], out)
}

/// `x · wᵀ + b` for `x: [N, D]`, `w: [K, D]`.
pub fn linear(x: &Arr, w: &Arr, b: &[f64]) -> Arr {
    let (n, d) = (x.shape[0], x.shape[1]);
    let k = w.shape[0];
    assert_eq!(w.shape[1], d);
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for o in 0..k {
            out[i * k + o] = b[o] + (0..d).map(|j| x.data[i * d + j] * w.data[o * d + j]).sum::<f64>();
        }
    }
    Arr::new(&[n, k], out)
}

/// Per-example `−log softmax(z)[y]`, computed with the log-sum-exp shift.
pub fn cross_entropy_per_example(logits: &Arr, labels: &[usize]) -> Vec<f64> {
    let k = logits.shape[1];
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = &logits.data[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .collect()
}

pub fn cross_entropy(logits: &Arr, labels: &[usize]) -> f64 {
    let per = cross_entropy_per_example(logits, labels);
    per.iter().sum::<f64>() / per.len() as f64
}

/// Named parameter values of a model, as `f64`.
pub fn model_params(model: &Model) -> Vec<(String, Arr)> {
    model
        .arrays()
        .iter()
        .map(|a| (a.name.clone(), Arr::from_f32(a.tensor.shape(), a.tensor.data())))
        .collect()
}

fn get<'a>(params: &'a [(String, Arr)], name: &str) -> &'a Arr {
    &params
        .iter()
        .find(|(n, _)| n == name)
        .unwrap_or_else(|| panic!("missing array {name}"))
        .1
}

fn bn(params: &[(String, Arr)], name: &str, x: &Arr, train: bool) -> Arr {
    let g = &get(params, &format!("{name}.gamma")).data;
    let b = &get(params, &format!("{name}.beta")).data;
    if train {
        bn_train(x, g, b).0
    } else {
        bn_eval(
            x,
            g,
            b,
            &get(params, &format!("{name}.running_mean")).data,
            &get(params, &format!("{name}.running_var")).data,
        )
    }
}

/// ReLU that also records which inputs were positive.
fn relu_logged(x: &Arr, signs: &mut Vec<bool>) -> Arr {
    signs.extend(x.data.iter().map(|&v| v > 0.0));
    relu(x)
}

/// Pre-activation ResNet forward from first principles: initial 3×3 conv,
/// then per block `BN → ReLU → conv → BN → ReLU → conv` added to the block
/// input (average-pooled and zero-padded when the shape changes), then
/// `BN → ReLU → global average pool → linear`.
///
/// Also returns the sign pattern of every ReLU input, which identifies the
/// piecewise-linear region the forward pass lies in.
pub fn resnet_forward(cfg: &ResNetConfig, params: &[(String, Arr)], x: &Arr, train: bool) -> (Arr, Vec<bool>) {
    let mut signs = Vec::new();
    let mut h = conv2d(x, get(params, "conv1.weight"), 1, 1);
    for (s, &width) in cfg.widths.iter().enumerate() {
        for blk in 0..cfg.depth_n {
            let stride = if s > 0 && blk == 0 { 2 } else { 1 };
            let p = format!("stage{}.block{}", s + 1, blk + 1);
            let inp = h.clone();
            let mut y = relu_logged(&bn(params, &format!("{p}.bn1"), &h, train), &mut signs);
            y = conv2d(&y, get(params, &format!("{p}.conv1.weight")), stride, 1);
            y = relu_logged(&bn(params, &format!("{p}.bn2"), &y, train), &mut signs);
            y = conv2d(&y, get(params, &format!("{p}.conv2.weight")), 1, 1);
            let mut sc = if stride == 2 { avg_pool2(&inp) } else { inp };
            if sc.shape[1] < width {
                sc = pad_channels(&sc, width);
            }
            h = add(&y, &sc);
        }
    }
    let h = relu_logged(&bn(params, "bn_final", &h, train), &mut signs);
    let pooled = global_avg_pool(&h);
    let logits = linear(&pooled, get(params, "logit.weight"), &get(params, "logit.bias").data);
    (logits, signs)
}

/// Forward of any supported architecture, with the ReLU sign pattern.
pub fn model_forward_signs(model: &Model, params: &[(String, Arr)], x: &Arr, train: bool) -> (Arr, Vec<bool>) {
    match model.architecture() {
        Architecture::ResNet(cfg) => resnet_forward(cfg, params, x, train),
        Architecture::Linear { .. } => {
            let n = x.shape[0];
            let d = x.data.len() / n;
            let flat = Arr::new(&[n, d], x.data.clone());
            (linear(&flat, get(params, "logit.weight"), &get(params, "logit.bias").data), Vec::new())
        }
    }
}

pub fn model_forward(model: &Model, params: &[(String, Arr)], x: &Arr, train: bool) -> Arr {
    model_forward_signs(model, params, x, train).0
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn numeric_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences of a piecewise-smooth `f` that reports the
/// piece it evaluated (`f(p) = (value, region)`). A probe pair that leaves
/// the region of `x` straddles a kink, where a difference quotient does not
/// estimate the derivative; such coordinates are re-probed with the step
/// divided by ten, down to `h · 1e-4`.
pub fn numeric_gradient_piecewise(f: &mut dyn FnMut(&[f64]) -> (f64, Vec<bool>), x: &[f64], h: f64) -> Vec<f64> {
    let region = f(x).1;
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            let mut step = h;
            loop {
                p[i] = orig + step;
                let (up, ru) = f(&p);
                p[i] = orig - step;
                let (down, rd) = f(&p);
                p[i] = orig;
                if (ru == region && rd == region) || step <= h * 1e-4 {
                    break (up - down) / (2.0 * step);
                }
                step /= 10.0;
            }
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().cloned()).max(norm(&mut b.iter().cloned()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Closed-form parameter count of a pre-activation ResNet, independent of
/// the model builder: `(learnable total, batch-norm γ+β)`.
pub fn resnet_param_oracle(cfg: &ResNetConfig) -> (usize, usize) {
    let mut conv = cfg.in_channels * cfg.widths[0] * 9;
    let mut bn_channels = 0;
    let mut c = cfg.widths[0];
    for &w in &cfg.widths {
        for _ in 0..cfg.depth_n {
            conv += c * w * 9 + w * w * 9;
            bn_channels += c + w;
            c = w;
        }
    }
    bn_channels += c;
    let logit = c * cfg.num_classes + cfg.num_classes;
    (conv + 2 * bn_channels + logit, 2 * bn_channels)
}
