//! Gradient-free square-patch random search on the logit margin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{apply, require_eval, AttackKind, AttackResult, AttackSpec};
use crate::autodiff::Tape;
use crate::data::LabeledBatch;
use crate::error::Result;
use crate::nn::{argmax_rows, Classifier};
use crate::tensor::Tensor;

/// `max_{j≠y} z_j − z_y` per row; positive exactly when some wrong class
/// strictly outscores the label.
pub fn margin_losses(logits: &Tensor, labels: &[usize]) -> Vec<f32> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| {
            let other = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .map(|(_, &v)| v)
                .fold(f32::NEG_INFINITY, f32::max);
            other - row[y]
        })
        .collect()
}

/// Side length of the square patch at query `i` of `total`, for an
/// `h × w` image. The covered fraction starts at `p_init` and halves at
/// fixed points of the query budget; `p_init = 0` yields 0 (no proposals).
pub fn square_size(p_init: f32, i: usize, total: usize, h: usize, w: usize) -> usize {
    if p_init <= 0.0 {
        return 0;
    }
    let t = (i as f64 / total.max(1) as f64 * 10_000.0) as usize;
    let halvings = match t {
        0..=10 => 0,
        11..=50 => 1,
        51..=200 => 2,
        201..=500 => 3,
        501..=1000 => 4,
        1001..=2000 => 5,
        2001..=4000 => 6,
        4001..=6000 => 7,
        6001..=8000 => 8,
        _ => 9,
    };
    let p = p_init as f64 / f64::from(1u32 << halvings);
    let s = (p * (h * w) as f64).sqrt().round() as usize;
    s.max(1).min(h.min(w))
}

fn logits_of(model: &dyn Classifier, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let l = model.logits_on(&mut tape, xv)?;
    Ok(tape.value(l).clone())
}

/// Starts from the clean input; each query overwrites one random square
/// patch of every still-correct example with per-channel `±ε` and keeps
/// the proposal when the margin strictly increases.
pub fn random_search_attack(
    model: &dyn Classifier,
    batch: &LabeledBatch,
    spec: &AttackSpec,
    queries: usize,
) -> Result<AttackResult> {
    require_eval(model)?;
    spec.validate()?;
    let p_init = match spec.kind {
        AttackKind::RandomSearch { p_init, .. } => p_init,
        _ => 0.05,
    };
    let x = &batch.images;
    let shape = x.shape();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let per = c * h * w;
    let eps = spec.epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut delta = vec![0.0f32; x.numel()];
    let mut logits = logits_of(model, x)?;
    let mut margin = margin_losses(&logits, &batch.labels);

    if eps > 0.0 {
        for q in 0..queries {
            let s = square_size(p_init, q, queries, h, w);
            if s == 0 {
                break;
            }
            let active: Vec<usize> = argmax_rows(&logits)
                .iter()
                .zip(&batch.labels)
                .enumerate()
                .filter(|(_, (p, y))| p == y)
                .map(|(i, _)| i)
                .collect();
            if active.is_empty() {
                break;
            }
            let mut proposal = delta.clone();
            for &i in &active {
                let (vy, vx) = (rng.random_range(0..=h - s), rng.random_range(0..=w - s));
                for ch in 0..c {
                    let v = if rng.random_bool(0.5) { eps } else { -eps };
                    for yy in vy..vy + s {
                        let row = i * per + ch * h * w + yy * w;
                        proposal[row + vx..row + vx + s].fill(v);
                    }
                }
            }
            let cand_logits = logits_of(model, &apply(x, &proposal))?;
            let cand_margin = margin_losses(&cand_logits, &batch.labels);
            let k = logits.shape()[1];
            for &i in &active {
                if cand_margin[i] > margin[i] {
                    margin[i] = cand_margin[i];
                    delta[i * per..(i + 1) * per].copy_from_slice(&proposal[i * per..(i + 1) * per]);
                    logits.data_mut()[i * k..(i + 1) * k]
                        .copy_from_slice(&cand_logits.data()[i * k..(i + 1) * k]);
                }
            }
        }
    }

    let adversarial = apply(x, &delta);
    let pred = argmax_rows(&logits);
    Ok(AttackResult {
        adversarial,
        success_mask: pred.iter().zip(&batch.labels).map(|(p, y)| p != y).collect(),
        final_loss: margin,
    })
}
