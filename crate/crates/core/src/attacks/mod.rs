//! L∞ adversarial attacks and worst-case robust evaluation.
//!
//! Every attack returns points inside the L∞ ball of radius `epsilon`
//! around the clean input, clipped to the `[0, 1]` pixel range, and only
//! runs against eval-mode models so that attacking never moves batch-norm
//! statistics.

mod eval;
mod gradient;
mod random_search;

pub use eval::{default_ensemble, evaluate_robust_error, AttackReport, RobustEval};
pub use gradient::{fgsm, input_gradient, pgd};
pub use random_search::{margin_losses, random_search_attack, square_size};

use serde::{Deserialize, Serialize};

use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::nn::Classifier;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    /// Gradient-free square-patch search; `p_init` is the initial fraction
    /// of pixels covered by a proposal patch (0 disables proposals).
    RandomSearch { queries: usize, p_init: f32 },
}

/// What the gradient attacks ascend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Cross-entropy of the true label.
    Untargeted,
    /// Negative cross-entropy of the highest-scoring wrong class on the
    /// clean input.
    RunnerUp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// L∞ radius in pixel units (`[0, 1]` scale).
    pub epsilon: f32,
    pub steps: usize,
    pub step_size: f32,
    pub restarts: usize,
    pub random_init: bool,
    pub objective: Objective,
    pub seed: u64,
}

impl AttackSpec {
    /// PGD with step size `ε/4`, uniform random start and one restart.
    pub fn pgd(epsilon: f32, steps: usize) -> Self {
        AttackSpec {
            kind: AttackKind::Pgd,
            epsilon,
            steps,
            step_size: epsilon / 4.0,
            restarts: 1,
            random_init: true,
            objective: Objective::Untargeted,
            seed: 0,
        }
    }

    pub fn fgsm(epsilon: f32) -> Self {
        AttackSpec {
            kind: AttackKind::Fgsm,
            steps: 1,
            step_size: epsilon,
            random_init: false,
            ..Self::pgd(epsilon, 1)
        }
    }

    pub fn random_search(epsilon: f32, queries: usize) -> Self {
        AttackSpec {
            kind: AttackKind::RandomSearch {
                queries,
                p_init: 0.05,
            },
            random_init: false,
            ..Self::pgd(epsilon, 0)
        }
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        // A zero radius admits a zero step: every iterate is the clean input.
        if self.kind == AttackKind::Pgd
            && self.steps > 0
            && !(self.step_size > 0.0 || (self.epsilon == 0.0 && self.step_size == 0.0))
        {
            return bad("PGD step size must be positive".into());
        }
        if self.kind == AttackKind::Pgd && self.restarts == 0 {
            return bad("PGD needs at least one restart".into());
        }
        if let AttackKind::RandomSearch { queries, p_init } = self.kind {
            if queries == 0 {
                return bad("random search needs at least one query".into());
            }
            if !(0.0..=1.0).contains(&p_init) {
                return bad(format!("random search p_init {p_init} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Short human-readable name, e.g. `pgd50x5-runner_up`.
    pub fn label(&self) -> String {
        let obj = match self.objective {
            Objective::Untargeted => "",
            Objective::RunnerUp => "-runner_up",
        };
        match self.kind {
            AttackKind::Fgsm => format!("fgsm{obj}"),
            AttackKind::Pgd => format!("pgd{}x{}{obj}", self.steps, self.restarts),
            AttackKind::RandomSearch { queries, .. } => format!("rs{queries}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    /// `x + δ`, same shape as the clean batch.
    pub adversarial: Tensor,
    /// Prediction on `adversarial` differs from the label.
    pub success_mask: Vec<bool>,
    /// Per-example attack loss at `adversarial`: cross-entropy of the true
    /// label for gradient attacks, the logit margin for random search.
    pub final_loss: Vec<f32>,
}

/// Dispatches on `spec.kind`.
pub fn run_attack(model: &dyn Classifier, batch: &LabeledBatch, spec: &AttackSpec) -> Result<AttackResult> {
    match spec.kind {
        AttackKind::Fgsm => fgsm(model, batch, spec),
        AttackKind::Pgd => pgd(model, batch, spec),
        AttackKind::RandomSearch { queries, .. } => random_search_attack(model, batch, spec, queries),
    }
}

fn require_eval(model: &dyn Classifier) -> Result<()> {
    if model.is_eval() {
        Ok(())
    } else {
        Err(Error::NotEvalMode)
    }
}

/// Projects `x + delta` onto the ε-ball around `x` and the pixel box.
fn project(clean: &[f32], delta: &mut [f32], eps: f32) {
    for (d, &x) in delta.iter_mut().zip(clean) {
        let d_ball = d.clamp(-eps, eps);
        *d = (x + d_ball).clamp(0.0, 1.0) - x;
    }
}

fn apply(clean: &Tensor, delta: &[f32]) -> Tensor {
    let data = clean
        .data()
        .iter()
        .zip(delta)
        .map(|(x, d)| (x + d).clamp(0.0, 1.0))
        .collect();
    Tensor::new(clean.shape().to_vec(), data).expect("same shape")
}
