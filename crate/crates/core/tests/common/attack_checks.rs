//! Attack invariants: feasibility of every adversarial point, optimality of
//! PGD on linear models against exhaustive corner search, and monotonicity
//! of robust error in the attack radius.

use bnrobust::attacks::{evaluate_robust_error, run_attack, AttackSpec, Objective};
use bnrobust::data::{gaussian_blobs, BlobSpec, DatasetSplit, LabeledBatch, SplitTag};
use bnrobust::nn::{build_linear, build_resnet, Model, ResNetConfig};
use bnrobust::training::{make_freeze_mask, train, ConfigName, LrSchedule, TrainConfig};
use bnrobust::Tensor;
use rand::Rng;

use super::*;

/// Slack for `f32` rounding of `x ± ε`; a feasible point may sit this far
/// outside the exact real-valued ball.
pub const BALL_SLACK: f32 = 1e-6;
pub const CORNER_TOL: f64 = 1e-4;

/// Feasibility over many random attack invocations.
#[derive(Debug, Clone)]
pub struct BallReport {
    pub invocations: usize,
    pub violations: usize,
    /// Largest `|x_adv − x|∞ − ε` seen (negative when always inside).
    pub worst_excess: f32,
}

fn random_spec(r: &mut ChaCha8Rng, eps: f32) -> AttackSpec {
    let seed = r.random();
    match r.random_range(0..4) {
        0 => AttackSpec::fgsm(eps),
        1 => AttackSpec::pgd(eps, r.random_range(1..=8)).with_restarts(r.random_range(1..=2)),
        2 => AttackSpec::pgd(eps, r.random_range(1..=8)).with_objective(Objective::RunnerUp),
        _ => AttackSpec::random_search(eps, r.random_range(1..=30)),
    }
    .with_seed(seed)
}

/// Images with a share of pixels pinned to the box faces, where clipping
/// matters most.
fn random_images(r: &mut ChaCha8Rng, n: usize, shape: [usize; 3]) -> Tensor {
    let d: usize = shape.iter().product();
    let data = (0..n * d)
        .map(|_| match r.random_range(0..5) {
            0 => 0.0,
            1 => 1.0,
            _ => r.random_range(0.0..1.0),
        })
        .collect();
    Tensor::new(vec![n, shape[0], shape[1], shape[2]], data).unwrap()
}

/// Runs `invocations` attacks of random kind, radius, seed and model
/// (linear or micro-ResNet), checking each output against the ε-ball and
/// the pixel box.
pub fn ball_and_clip(invocations: usize, seed: u64) -> BallReport {
    let mut r = rng(seed);
    let mut linear = build_linear([1, 4, 4], 3, 1).unwrap();
    let mut resnet = build_resnet(&ResNetConfig::micro(&[2, 4, 4], 1, 3), 2).unwrap();
    linear.set_mode(bnrobust::nn::Mode::Eval);
    resnet.set_mode(bnrobust::nn::Mode::Eval);
    let mut report = BallReport {
        invocations,
        violations: 0,
        worst_excess: f32::NEG_INFINITY,
    };
    for i in 0..invocations {
        let eps = match r.random_range(0..6) {
            0 => 0.0,
            1 => 1.0,
            _ => r.random_range(0.0..0.5f32),
        };
        let (model, shape): (&Model, [usize; 3]) = if i % 2 == 0 {
            (&linear, [1, 4, 4])
        } else {
            (&resnet, [1, 8, 8])
        };
        let n = r.random_range(1..=4);
        let batch = LabeledBatch {
            images: random_images(&mut r, n, shape),
            labels: (0..n).map(|_| r.random_range(0..3)).collect(),
        };
        let spec = random_spec(&mut r, eps);
        let out = run_attack(model, &batch, &spec).unwrap();
        assert_eq!(out.adversarial.shape(), batch.images.shape());
        let mut bad = false;
        for (&a, &x) in out.adversarial.data().iter().zip(batch.images.data()) {
            let excess = (a - x).abs() - eps;
            report.worst_excess = report.worst_excess.max(excess);
            bad |= excess > BALL_SLACK || !(0.0..=1.0).contains(&a) || !a.is_finite();
        }
        report.violations += usize::from(bad);
    }
    report
}

fn ce(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - logits[y]
}

/// Exhaustive maximum of the cross-entropy of a linear model over the
/// vertices of `[x−ε, x+ε] ∩ [0, 1]`. The loss is convex in the input, so
/// its maximum over this box is attained at a vertex.
pub fn corner_maximum(w: &[f64], b: &[f64], x: &[f64], y: usize, eps: f64) -> f64 {
    let d = x.len();
    let k = b.len();
    let mut best = f64::NEG_INFINITY;
    for corner in 0u32..(1 << d) {
        let p: Vec<f64> = (0..d)
            .map(|j| {
                if corner >> j & 1 == 1 {
                    (x[j] + eps).min(1.0)
                } else {
                    (x[j] - eps).max(0.0)
                }
            })
            .collect();
        let logits: Vec<f64> = (0..k)
            .map(|o| b[o] + (0..d).map(|j| w[o * d + j] * p[j]).sum::<f64>())
            .collect();
        best = best.max(ce(&logits, y));
    }
    best
}

/// Largest gap between the loss PGD reaches and the exhaustive corner
/// maximum, over random binary linear models, inputs and radii.
pub fn pgd_vs_corners(models: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [1, 2, 4];
    let d = 8;
    let mut worst = 0.0f64;
    for m in 0..models {
        let mut model = build_linear(shape, 2, m as u64).unwrap();
        for v in model.tensor_mut("logit.weight").unwrap().data_mut() {
            *v = r.random_range(-2.0..2.0);
        }
        for v in model.tensor_mut("logit.bias").unwrap().data_mut() {
            *v = r.random_range(-0.5..0.5);
        }
        model.set_mode(bnrobust::nn::Mode::Eval);
        let w: Vec<f64> = model.array("logit.weight").unwrap().tensor.data().iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = model.array("logit.bias").unwrap().tensor.data().iter().map(|&v| v as f64).collect();
        let n = 4;
        let images = random_images(&mut r, n, shape);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let eps = r.random_range(0.01..0.3f32);
        let batch = LabeledBatch {
            images: images.clone(),
            labels: labels.clone(),
        };
        let out = run_attack(&model, &batch, &AttackSpec::pgd(eps, 20).with_seed(m as u64)).unwrap();
        for i in 0..n {
            let x: Vec<f64> = images.data()[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect();
            let best = corner_maximum(&w, &b, &x, labels[i], eps as f64);
            worst = worst.max((out.final_loss[i] as f64 - best).abs());
        }
    }
    worst
}

/// Two-class Gaussian blobs that a linear model separates cleanly.
pub fn blob_splits(separation: f32, seed: u64) -> (DatasetSplit, DatasetSplit) {
    let spec = BlobSpec {
        num_classes: 2,
        shape: [1, 4, 4],
        separation,
        noise_std: 0.1,
        center_seed: seed,
    };
    (
        gaussian_blobs(&spec, 200, seed + 1, SplitTag::Train).unwrap(),
        gaussian_blobs(&spec, 100, seed + 2, SplitTag::Test).unwrap(),
    )
}

/// A linear model trained normally on the blobs.
pub fn trained_linear(train_split: &DatasetSplit, seed: u64) -> Model {
    let mut model = build_linear([1, 4, 4], 2, seed).unwrap();
    let mask = make_freeze_mask(&model, ConfigName::Normal, false, false);
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 32,
        lr_schedule: LrSchedule::constant(0.05),
        seed,
        ..TrainConfig::from_scratch(0.1)
    };
    train(&mut model, train_split, &mask, &cfg, false).unwrap();
    model
}

/// Robust error (%) of `model` on `split` at each radius, under one PGD
/// attack with restarts.
pub fn robust_error_curve(model: &Model, split: &DatasetSplit, radii: &[f32]) -> Vec<f64> {
    radii
        .iter()
        .map(|&eps| {
            let spec = AttackSpec::pgd(eps, 20).with_restarts(2).with_seed(3);
            evaluate_robust_error(model, split, &[spec], split.len(), 50).unwrap().robust_error
        })
        .collect()
}
