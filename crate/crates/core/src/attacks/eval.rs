//! Worst-case robust error over an attack ensemble.

use serde::{Deserialize, Serialize};

use super::{require_eval, run_attack, AttackSpec};
use crate::data::{BatchIter, DatasetSplit};
use crate::error::{Error, Result};
use crate::nn::Classifier;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub name: String,
    pub epsilon: f32,
    /// Percentage of examples misclassified clean or fooled by this member.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustEval {
    pub n: usize,
    /// Percentage misclassified on clean inputs.
    pub clean_error: f64,
    /// Percentage misclassified clean or fooled by at least one member.
    pub robust_error: f64,
    pub per_attack: Vec<AttackReport>,
    /// Per example (canonical order): counted as a robust error.
    pub robust_mistakes: Vec<bool>,
}

fn percent(count: usize, n: usize) -> f64 {
    100.0 * count as f64 / n as f64
}

/// Evaluates the first `n_examples` of `split` against every member of
/// `ensemble`. Only clean-correct examples are attacked; an example is a
/// robust error if it is misclassified clean or any member succeeds on it.
/// Each member's seed is mixed with the batch index, so results depend only
/// on the inputs, not on evaluation history.
pub fn evaluate_robust_error(
    model: &dyn Classifier,
    split: &DatasetSplit,
    ensemble: &[AttackSpec],
    n_examples: usize,
    batch_size: usize,
) -> Result<RobustEval> {
    require_eval(model)?;
    if ensemble.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    ensemble.iter().try_for_each(AttackSpec::validate)?;
    if n_examples == 0 || n_examples > split.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot evaluate {n_examples} examples of a split with {}",
            split.len()
        )));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    if split.num_classes != model.num_classes() {
        return Err(Error::InvalidConfig(format!(
            "split has {} classes, model {}",
            split.num_classes,
            model.num_classes()
        )));
    }

    let mut clean_wrong = vec![false; n_examples];
    let mut member_wrong = vec![vec![false; n_examples]; ensemble.len()];
    for (b, indices) in BatchIter::sequential(n_examples, batch_size).enumerate() {
        let batch = split.batch(&indices);
        let pred = {
            let mut tape = crate::autodiff::Tape::new();
            let xv = tape.constant(batch.images.clone());
            let l = model.logits_on(&mut tape, xv)?;
            crate::nn::argmax_rows(tape.value(l))
        };
        let correct: Vec<usize> = indices
            .iter()
            .zip(pred.iter().zip(&batch.labels))
            .filter_map(|(&i, (p, y))| {
                clean_wrong[i] = p != y;
                (p == y).then_some(i)
            })
            .collect();
        if correct.is_empty() {
            continue;
        }
        let sub = split.batch(&correct);
        for (m, spec) in ensemble.iter().enumerate() {
            let seeded = spec
                .clone()
                .with_seed(spec.seed ^ (b as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
            let result = run_attack(model, &sub, &seeded)?;
            for (&i, &fooled) in correct.iter().zip(&result.success_mask) {
                member_wrong[m][i] = fooled;
            }
        }
    }

    let robust_mistakes: Vec<bool> = (0..n_examples)
        .map(|i| clean_wrong[i] || member_wrong.iter().any(|w| w[i]))
        .collect();
    let per_attack = ensemble
        .iter()
        .zip(&member_wrong)
        .map(|(spec, wrong)| AttackReport {
            name: spec.label(),
            epsilon: spec.epsilon,
            error: percent(
                (0..n_examples).filter(|&i| clean_wrong[i] || wrong[i]).count(),
                n_examples,
            ),
        })
        .collect();
    Ok(RobustEval {
        n: n_examples,
        clean_error: percent(clean_wrong.iter().filter(|&&w| w).count(), n_examples),
        robust_error: percent(robust_mistakes.iter().filter(|&&w| w).count(), n_examples),
        per_attack,
        robust_mistakes,
    })
}

/// PGD-50 with five restarts on both objectives plus a 5000-query random
/// search, all at radius `epsilon`.
pub fn default_ensemble(epsilon: f32) -> Vec<AttackSpec> {
    vec![
        AttackSpec::pgd(epsilon, 50).with_restarts(5),
        AttackSpec::pgd(epsilon, 50)
            .with_restarts(5)
            .with_objective(super::Objective::RunnerUp)
            .with_seed(1),
        AttackSpec::random_search(epsilon, 5000).with_seed(2),
    ]
}
