//! FGSM and multi-restart PGD.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{apply, project, require_eval, AttackResult, AttackSpec, Objective};
use crate::autodiff::{per_example_cross_entropy, Tape};
use crate::data::LabeledBatch;
use crate::error::Result;
use crate::nn::{argmax_rows, Classifier};
use crate::tensor::Tensor;

/// Gradient of `Σᵢ wᵢ·CE(f(x)ᵢ, targetᵢ)` with respect to the input, plus
/// the logits at `x`.
pub fn input_gradient(
    model: &dyn Classifier,
    x: &Tensor,
    targets: &[usize],
    weights: &[f32],
) -> Result<(Vec<f32>, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.leaf_owned(x.clone(), true);
    let logits = model.logits_on(&mut tape, xv)?;
    let loss = tape.weighted_cross_entropy(logits, targets, weights)?;
    let grads = tape.backward(loss)?;
    let g = grads.get(xv).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
    Ok((g, tape.value(logits).clone()))
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clean_logits(model: &dyn Classifier, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let l = model.logits_on(&mut tape, xv)?;
    Ok(tape.value(l).clone())
}

/// Labels and weights of the ascent objective.
fn objective_targets(
    model: &dyn Classifier,
    batch: &LabeledBatch,
    objective: Objective,
) -> Result<(Vec<usize>, Vec<f32>)> {
    match objective {
        Objective::Untargeted => Ok((batch.labels.clone(), vec![1.0; batch.len()])),
        Objective::RunnerUp => {
            let logits = clean_logits(model, &batch.images)?;
            let k = model.num_classes();
            let targets = logits
                .data()
                .chunks(k)
                .zip(&batch.labels)
                .map(|(row, &y)| {
                    (0..k)
                        .filter(|&j| j != y)
                        .fold(None, |best: Option<usize>, j| match best {
                            Some(b) if row[b] >= row[j] => Some(b),
                            _ => Some(j),
                        })
                        .expect("at least two classes")
                })
                .collect();
            Ok((targets, vec![-1.0; batch.len()]))
        }
    }
}

fn evaluate(model: &dyn Classifier, adv: Tensor, labels: &[usize]) -> Result<AttackResult> {
    let logits = clean_logits(model, &adv)?;
    let pred = argmax_rows(&logits);
    let final_loss = per_example_cross_entropy(&logits, labels)?;
    Ok(AttackResult {
        adversarial: adv,
        success_mask: pred.iter().zip(labels).map(|(p, y)| p != y).collect(),
        final_loss,
    })
}

/// Fast gradient sign method: `x' = clip(x + ε·sign(∇ₓL))`.
pub fn fgsm(model: &dyn Classifier, batch: &LabeledBatch, spec: &AttackSpec) -> Result<AttackResult> {
    require_eval(model)?;
    spec.validate()?;
    let x = &batch.images;
    if spec.epsilon == 0.0 {
        return evaluate(model, x.clone(), &batch.labels);
    }
    let (targets, weights) = objective_targets(model, batch, spec.objective)?;
    let (g, _) = input_gradient(model, x, &targets, &weights)?;
    let mut delta: Vec<f32> = g.iter().map(|&v| spec.epsilon * sign(v)).collect();
    project(x.data(), &mut delta, spec.epsilon);
    evaluate(model, apply(x, &delta), &batch.labels)
}

/// Projected gradient ascent on the L∞ ball with optional uniform random
/// start. Across restarts each example keeps the perturbation that fools
/// the model, preferring higher loss among equals.
pub fn pgd(model: &dyn Classifier, batch: &LabeledBatch, spec: &AttackSpec) -> Result<AttackResult> {
    require_eval(model)?;
    spec.validate()?;
    let x = &batch.images;
    let n = batch.len();
    let per = x.numel() / n.max(1);
    let (targets, weights) = objective_targets(model, batch, spec.objective)?;
    let mut best: Option<AttackResult> = None;

    for restart in 0..spec.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(
            spec.seed ^ (restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let mut delta = vec![0.0f32; x.numel()];
        if spec.random_init && spec.epsilon > 0.0 {
            delta
                .iter_mut()
                .for_each(|d| *d = rng.random_range(-spec.epsilon..=spec.epsilon));
            project(x.data(), &mut delta, spec.epsilon);
        }
        for _ in 0..spec.steps {
            let (g, _) = input_gradient(model, &apply(x, &delta), &targets, &weights)?;
            delta
                .iter_mut()
                .zip(&g)
                .for_each(|(d, &gv)| *d += spec.step_size * sign(gv));
            project(x.data(), &mut delta, spec.epsilon);
        }
        let result = evaluate(model, apply(x, &delta), &batch.labels)?;
        best = Some(match best {
            None => result,
            Some(mut b) => {
                for i in 0..n {
                    let better = (result.success_mask[i] && !b.success_mask[i])
                        || (result.success_mask[i] == b.success_mask[i]
                            && result.final_loss[i] > b.final_loss[i]);
                    if better {
                        b.success_mask[i] = result.success_mask[i];
                        b.final_loss[i] = result.final_loss[i];
                        b.adversarial.data_mut()[i * per..(i + 1) * per]
                            .copy_from_slice(&result.adversarial.data()[i * per..(i + 1) * per]);
                    }
                }
                b
            }
        });
    }
    Ok(best.expect("at least one restart"))
}
