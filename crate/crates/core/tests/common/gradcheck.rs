//! Central-finite-difference gradient checks of every differentiable tape
//! operation and of a full micro-ResNet against the `f64` oracles.

use bnrobust::autodiff::{Tape, Var};
use bnrobust::nn::{build_resnet, Mode, Model, ResNetConfig};
use bnrobust::{Result, Tensor};
use rand::Rng;

use super::*;

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-3;

/// Outcome of one gradient check: worst relative error over its inputs.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
}

type TapeFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;
type OracleFn<'a> = dyn Fn(&[Arr]) -> Arr + 'a;

/// Compares reverse-mode gradients of `⟨op(inputs), r⟩` (random `r`) with
/// central differences of the same projection of the oracle.
pub fn check_op(name: &str, inputs: &[Arr], op: &TapeFn, oracle: &OracleFn, seed: u64) -> GradCheck {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|a| tape.leaf_owned(Tensor::new(a.shape.clone(), a.to_f32()).unwrap(), true))
        .collect();
    let out = op(&mut tape, &vars).unwrap();
    let out_shape = tape.value(out).shape().to_vec();
    let mut r = rng(seed);
    let proj: Vec<f64> = uniform_vec(&mut r, out_shape.iter().product(), -1.0, 1.0);
    let pv = tape.constant(Tensor::new(out_shape, proj.iter().map(|&v| v as f32).collect()).unwrap());
    let prod = tape.mul(out, pv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*v) {
            Some(g) => g.iter().map(|&x| x as f64).collect(),
            None => vec![0.0; inputs[i].data.len()],
        };
        let mut work = inputs.to_vec();
        let mut f = |p: &[f64]| {
            work[i].data.copy_from_slice(p);
            let o = oracle(&work);
            o.data.iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>()
        };
        let numeric = numeric_gradient(&mut f, &inputs[i].data, FD_STEP);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    GradCheck {
        name: name.to_string(),
        rel_error: worst,
    }
}

fn random_arr(r: &mut impl Rng, shape: &[usize]) -> Arr {
    let n = shape.iter().product();
    Arr::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// Values bounded away from zero so that no finite-difference probe
/// crosses a ReLU kink.
fn away_from_zero(r: &mut impl Rng, shape: &[usize]) -> Arr {
    let n = shape.iter().product();
    Arr::new(
        shape,
        (0..n)
            .map(|_| {
                let m: f64 = r.random_range(0.1..1.0);
                if r.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
}

fn scalar(v: f64) -> Arr {
    Arr::new(&[], vec![v])
}

fn broadcast(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    Arr::new(
        &a.shape,
        a.data.iter().enumerate().map(|(i, &x)| f(x, b.data[i % b.data.len()])).collect(),
    )
}

/// Gradient checks of every differentiable tape operation.
pub fn op_checks() -> Vec<GradCheck> {
    let mut r = rng(7);
    let mut out = Vec::new();
    let x4 = random_arr(&mut r, &[2, 3, 5, 5]);
    let k = random_arr(&mut r, &[4, 3, 3, 3]);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        out.push(check_op(
            &format!("conv2d stride {stride} pad {pad}"),
            &[x4.clone(), k.clone()],
            &|t, v| t.conv2d(v[0], v[1], stride, pad),
            &|a| conv2d(&a[0], &a[1], stride, pad),
            1,
        ));
    }
    let x2 = random_arr(&mut r, &[3, 5]);
    let w = random_arr(&mut r, &[4, 5]);
    let b = random_arr(&mut r, &[4]);
    out.push(check_op(
        "linear",
        &[x2.clone(), w, b],
        &|t, v| t.linear(v[0], v[1], Some(v[2])),
        &|a| linear(&a[0], &a[1], &a[2].data),
        2,
    ));
    let y2 = random_arr(&mut r, &[3, 5]);
    let row = random_arr(&mut r, &[5]);
    out.push(check_op("add", &[x2.clone(), y2.clone()], &|t, v| t.add(v[0], v[1]), &|a| broadcast(&a[0], &a[1], |x, y| x + y), 3));
    out.push(check_op(
        "add (broadcast)",
        &[x2.clone(), row.clone()],
        &|t, v| t.add(v[0], v[1]),
        &|a| broadcast(&a[0], &a[1], |x, y| x + y),
        4,
    ));
    out.push(check_op("sub", &[x2.clone(), y2.clone()], &|t, v| t.sub(v[0], v[1]), &|a| broadcast(&a[0], &a[1], |x, y| x - y), 5));
    out.push(check_op("mul", &[x2.clone(), y2], &|t, v| t.mul(v[0], v[1]), &|a| broadcast(&a[0], &a[1], |x, y| x * y), 6));
    out.push(check_op(
        "mul (broadcast)",
        &[x2.clone(), row],
        &|t, v| t.mul(v[0], v[1]),
        &|a| broadcast(&a[0], &a[1], |x, y| x * y),
        7,
    ));
    out.push(check_op(
        "add_scalar",
        &[x2.clone()],
        &|t, v| t.add_scalar(v[0], 0.7),
        &|a| Arr::new(&a[0].shape, a[0].data.iter().map(|x| x + 0.7).collect()),
        8,
    ));
    out.push(check_op(
        "mul_scalar",
        &[x2.clone()],
        &|t, v| t.mul_scalar(v[0], -1.3),
        &|a| Arr::new(&a[0].shape, a[0].data.iter().map(|x| x * -1.3).collect()),
        9,
    ));
    out.push(check_op("relu", &[away_from_zero(&mut r, &[3, 5])], &|t, v| t.relu(v[0]), &|a| relu(&a[0]), 10));
    out.push(check_op(
        "sum",
        &[x2.clone()],
        &|t, v| t.sum(v[0]),
        &|a| scalar(a[0].data.iter().sum()),
        11,
    ));
    out.push(check_op(
        "mean",
        &[x2.clone()],
        &|t, v| t.mean(v[0]),
        &|a| scalar(a[0].data.iter().sum::<f64>() / a[0].data.len() as f64),
        12,
    ));
    let gamma = Arr::new(&[3], uniform_vec(&mut r, 3, 0.5, 1.5));
    let beta = random_arr(&mut r, &[3]);
    out.push(check_op(
        "batch_norm_train",
        &[x4.clone(), gamma.clone(), beta.clone()],
        &|t, v| t.batch_norm_train(v[0], v[1], v[2], BN_EPS as f32).map(|(y, _)| y),
        &|a| bn_train(&a[0], &a[1].data, &a[2].data).0,
        13,
    ));
    let mean = uniform_vec(&mut r, 3, -0.5, 0.5);
    let var = uniform_vec(&mut r, 3, 0.2, 2.0);
    let (m32, v32): (Vec<f32>, Vec<f32>) = (mean.iter().map(|&v| v as f32).collect(), var.iter().map(|&v| v as f32).collect());
    let (mf, vf): (Vec<f64>, Vec<f64>) = (m32.iter().map(|&v| v as f64).collect(), v32.iter().map(|&v| v as f64).collect());
    out.push(check_op(
        "batch_norm_eval",
        &[x4.clone(), gamma, beta],
        &|t, v| t.batch_norm_eval(v[0], v[1], v[2], &m32, &v32, BN_EPS as f32),
        &|a| bn_eval(&a[0], &a[1].data, &a[2].data, &mf, &vf),
        14,
    ));
    let x6 = random_arr(&mut r, &[2, 3, 6, 6]);
    out.push(check_op("avg_pool2", &[x6.clone()], &|t, v| t.avg_pool2(v[0]), &|a| avg_pool2(&a[0]), 15));
    out.push(check_op("pad_channels", &[x6.clone()], &|t, v| t.pad_channels(v[0], 5), &|a| pad_channels(&a[0], 5), 16));
    out.push(check_op("global_avg_pool", &[x6.clone()], &|t, v| t.global_avg_pool(v[0]), &|a| global_avg_pool(&a[0]), 17));
    out.push(check_op(
        "reshape",
        &[x6],
        &|t, v| t.reshape(v[0], &[2, 108]),
        &|a| Arr::new(&[2, 108], a[0].data.clone()),
        18,
    ));
    let labels = [1usize, 0, 3];
    let logits = Arr::new(&[3, 4], uniform_vec(&mut r, 12, -3.0, 3.0));
    out.push(check_op(
        "cross_entropy",
        &[logits.clone()],
        &|t, v| t.cross_entropy(v[0], &labels),
        &|a| scalar(cross_entropy(&a[0], &labels)),
        19,
    ));
    let weights = [1.0f32, -1.0, 0.5];
    out.push(check_op(
        "weighted_cross_entropy",
        &[logits],
        &|t, v| t.weighted_cross_entropy(v[0], &labels, &weights),
        &|a| {
            let per = cross_entropy_per_example(&a[0], &labels);
            scalar(per.iter().zip(&weights).map(|(l, &w)| l * w as f64).sum::<f64>() / 3.0)
        },
        20,
    ));
    out
}

/// Small micro-ResNet with randomized batch-norm parameters and running
/// statistics, so that both modes exercise non-trivial affine maps.
pub fn micro_model(seed: u64) -> Model {
    let cfg = ResNetConfig::micro(&[2, 4, 4], 1, 3);
    let mut model = build_resnet(&cfg, seed).unwrap();
    let mut r = rng(seed ^ 0xabc);
    for a in model.arrays_mut() {
        let (lo, hi) = match a.name.rsplit('.').next().unwrap() {
            "gamma" => (0.5, 1.5),
            "beta" | "running_mean" | "bias" => (-0.3, 0.3),
            "running_var" => (0.5, 2.0),
            _ => continue,
        };
        for v in a.tensor.data_mut() {
            *v = r.random_range(lo..hi);
        }
    }
    model
}

/// Gradient check of the cross-entropy loss of a whole micro-ResNet with
/// respect to every parameter and to the input images. Probes that would
/// straddle a ReLU kink are shortened (see `numeric_gradient_piecewise`).
pub fn model_check(mode: Mode, seed: u64) -> GradCheck {
    let mut model = micro_model(seed);
    model.set_mode(mode);
    let mut r = rng(seed);
    let x = Arr::new(&[3, 1, 8, 8], uniform_vec(&mut r, 192, 0.0, 1.0));
    let labels = [0usize, 2, 1];

    let mut tape = Tape::new();
    let xv = tape.leaf_owned(Tensor::new(x.shape.clone(), x.to_f32()).unwrap(), true);
    let fwd = model.forward(&mut tape, xv, true).unwrap();
    let loss = tape.cross_entropy(fwd.logits, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();

    let train = mode == Mode::Train;
    let params = model_params(&model);
    let mut worst = {
        let mut f = |p: &[f64]| {
            let xi = Arr::new(&x.shape, p.to_vec());
            let (logits, region) = model_forward_signs(&model, &params, &xi, train);
            (cross_entropy(&logits, &labels), region)
        };
        let numeric = numeric_gradient_piecewise(&mut f, &x.data, FD_STEP);
        let analytic: Vec<f64> = grads.get(xv).unwrap().iter().map(|&v| v as f64).collect();
        relative_error(&analytic, &numeric)
    };
    for (idx, var) in &fwd.bindings {
        let mut work = params.clone();
        let start = work[*idx].1.data.clone();
        let mut f = |p: &[f64]| {
            work[*idx].1.data.copy_from_slice(p);
            let (logits, region) = model_forward_signs(&model, &work, &x, train);
            (cross_entropy(&logits, &labels), region)
        };
        let numeric = numeric_gradient_piecewise(&mut f, &start, FD_STEP);
        let analytic: Vec<f64> = grads.get(*var).unwrap().iter().map(|&v| v as f64).collect();
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    GradCheck {
        name: format!("micro-ResNet ({mode:?} mode)"),
        rel_error: worst,
    }
}

/// Every gradient check: all operations, then the model in both modes.
pub fn all_checks() -> Vec<GradCheck> {
    let mut v = op_checks();
    v.push(model_check(Mode::Train, 11));
    v.push(model_check(Mode::Eval, 12));
    v
}
