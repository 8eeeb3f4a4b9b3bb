use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{make_freeze_mask, ConfigName, FreezeMask, Sgd};
use crate::checkpoint::Checkpoint;
use crate::attacks::{evaluate_robust_error, pgd, AttackSpec};
use crate::autodiff::{per_example_cross_entropy, Tape};
use crate::data::{augment, AugmentConfig, BatchIter, DatasetSplit, SplitTag};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, Mode, Model};

/// Piecewise-constant learning rate: `(first epoch, lr)` pairs in
/// increasing epoch order, the first starting at epoch 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule(pub Vec<(usize, f32)>);

impl LrSchedule {
    pub fn constant(lr: f32) -> Self {
        LrSchedule(vec![(0, lr)])
    }

    /// `lr`, multiplied by `factor` at each milestone epoch.
    pub fn step_decay(lr: f32, milestones: &[usize], factor: f32) -> Self {
        let mut pieces = vec![(0, lr)];
        let mut cur = lr;
        for &m in milestones {
            cur *= factor;
            pieces.push((m, cur));
        }
        LrSchedule(pieces)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("learning-rate schedule: {m}")));
        match self.0.first() {
            Some((0, _)) => {}
            _ => return bad("must start at epoch 0"),
        }
        if self.0.iter().any(|&(_, lr)| !(lr > 0.0 && lr.is_finite())) {
            return bad("rates must be positive");
        }
        if self.0.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad("epochs must increase");
        }
        Ok(())
    }

    /// Rate in force during (0-based) `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        self.0
            .iter()
            .take_while(|&&(start, _)| start <= epoch)
            .last()
            .map_or(self.0[0].1, |&(_, lr)| lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub sgd_momentum: f32,
    pub weight_decay: f32,
    /// Attack used to craft training inputs in adversarial mode.
    pub inner_attack: AttackSpec,
    pub seed: u64,
    pub augment: Option<AugmentConfig>,
    /// Examples per split scored at the end of each epoch (0 disables).
    pub monitor_n: usize,
}

impl TrainConfig {
    /// 100 epochs at 0.1 with 10× decays at 50 and 75, PGD-10 inner attack.
    pub fn from_scratch(epsilon: f32) -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            lr_schedule: LrSchedule::step_decay(0.1, &[50, 75], 0.1),
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            inner_attack: AttackSpec::pgd(epsilon, 10),
            seed: 0,
            augment: None,
            monitor_n: 0,
        }
    }

    /// 30 epochs at 0.01 with a 10× decay at 20.
    pub fn fine_tune(epsilon: f32) -> Self {
        TrainConfig {
            epochs: 30,
            lr_schedule: LrSchedule::step_decay(0.01, &[20], 0.1),
            ..Self::from_scratch(epsilon)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "momentum {} must lie in [0, 1) and weight decay {} be non-negative",
                self.sgd_momentum, self.weight_decay
            )));
        }
        self.lr_schedule.validate()?;
        self.inner_attack.validate()
    }
}

/// One row of the per-epoch metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub split: SplitTag,
    /// Training rows: mean loss over the inputs actually trained on.
    /// Monitor rows: mean clean cross-entropy.
    pub loss: f64,
    /// Percent, over the first `monitor_n` examples; `None` when disabled.
    pub clean_err: Option<f64>,
    /// Percent under PGD-10 at the inner-attack radius.
    pub robust_err_pgd10: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Standard (`adversarial = false`) or min-max adversarial training.
///
/// In adversarial mode each batch is replaced by PGD examples crafted
/// against the current model in eval mode; the training forward then runs
/// in train mode, folding batch statistics into the running estimates iff
/// the mask says so. Arrays the mask freezes are never written. The model
/// is left in eval mode.
pub fn train(
    model: &mut Model,
    data: &DatasetSplit,
    mask: &FreezeMask,
    cfg: &TrainConfig,
    adversarial: bool,
) -> Result<TrainLog> {
    train_monitored(model, data, mask, cfg, adversarial, None)
}

/// [`train`], additionally scoring `monitor` (if given) after every epoch.
pub fn train_monitored(
    model: &mut Model,
    data: &DatasetSplit,
    mask: &FreezeMask,
    cfg: &TrainConfig,
    adversarial: bool,
    monitor: Option<&DatasetSplit>,
) -> Result<TrainLog> {
    train_with_callback(model, data, mask, cfg, adversarial, monitor, &mut |_, _| Ok(()))
}

/// [`train_monitored`] that hands the model (in eval mode) and the rows
/// logged so far to `on_epoch` after every completed epoch.
pub fn train_with_callback(
    model: &mut Model,
    data: &DatasetSplit,
    mask: &FreezeMask,
    cfg: &TrainConfig,
    adversarial: bool,
    monitor: Option<&DatasetSplit>,
    on_epoch: &mut dyn FnMut(&Model, &[EpochLog]) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    mask.apply(model)?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("training split is empty".into()));
    }
    if mask.reset_stats_first {
        model.reset_bn_statistics();
    }
    let mut opt = Sgd::new(cfg.sgd_momentum, cfg.weight_decay);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_schedule.lr_at(epoch);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64 + 1, 1));
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        let order = BatchIter::new(data.len(), cfg.batch_size, mix(cfg.seed, epoch as u64 + 1, 0));
        for (step, indices) in order.enumerate() {
            let mut batch = data.batch(&indices);
            if let Some(aug) = &cfg.augment {
                batch = augment(&batch, aug, &mut aug_rng);
            }
            if adversarial {
                model.set_mode(Mode::Eval);
                let spec = cfg
                    .inner_attack
                    .clone()
                    .with_seed(mix(cfg.inner_attack.seed ^ cfg.seed, epoch as u64 + 1, step as u64 + 1));
                batch.images = pgd(model, &batch, &spec)?.adversarial;
            }

            let mut tape = Tape::new();
            let x = tape.constant(batch.images.clone());
            let fwd = {
                model.set_mode(Mode::Train);
                model.forward(&mut tape, x, mask.any_trainable())?
            };
            let loss = tape.cross_entropy(fwd.logits, &batch.labels)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                model.set_mode(Mode::Eval);
                return Err(Error::NonFinite(format!(
                    "training loss {value} at epoch {} batch {step}",
                    epoch + 1
                )));
            }
            if mask.update_bn_stats {
                model.apply_batch_stats(&fwd.batch_stats);
            }
            if mask.any_trainable() {
                let grads = tape.backward(loss)?;
                model.zero_grads();
                model.accumulate_grads(&grads, &fwd.bindings)?;
                opt.step(model, mask, lr)?;
                model.zero_grads();
            }
            loss_sum += f64::from(value) * batch.len() as f64;
            seen += batch.len();
        }
        model.set_mode(Mode::Eval);

        let (clean_err, robust) = monitor_split(model, data, cfg)?;
        log.epochs.push(EpochLog {
            epoch: epoch + 1,
            split: data.tag,
            loss: loss_sum / seen as f64,
            clean_err,
            robust_err_pgd10: robust,
        });
        if let Some(m) = monitor {
            let (clean_err, robust) = monitor_split(model, m, cfg)?;
            log.epochs.push(EpochLog {
                epoch: epoch + 1,
                split: m.tag,
                loss: clean_loss(model, m, cfg.monitor_n.max(1).min(m.len()), cfg.batch_size)?,
                clean_err,
                robust_err_pgd10: robust,
            });
        }
        on_epoch(model, &log.epochs)?;
    }
    model.set_mode(Mode::Eval);
    Ok(log)
}

/// Loads `base`, builds the named mask and trains adversarially. Arrays
/// the mask freezes stay bit-identical to the checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn finetune_from_checkpoint(
    base: &Checkpoint,
    config: ConfigName,
    plus_logit: bool,
    plus_conv1: bool,
    reset_stats: bool,
    cfg: &TrainConfig,
    data: &DatasetSplit,
    monitor: Option<&DatasetSplit>,
) -> Result<(Model, TrainLog)> {
    let mut model = base.to_model()?;
    let mut mask = make_freeze_mask(&model, config, plus_logit, plus_conv1);
    mask.reset_stats_first = reset_stats;
    let log = train_monitored(&mut model, data, &mask, cfg, true, monitor)?;
    Ok((model, log))
}

fn monitor_split(model: &Model, split: &DatasetSplit, cfg: &TrainConfig) -> Result<(Option<f64>, Option<f64>)> {
    let n = cfg.monitor_n.min(split.len());
    if n == 0 {
        return Ok((None, None));
    }
    let spec = AttackSpec::pgd(cfg.inner_attack.epsilon, 10).with_seed(cfg.seed);
    let r = evaluate_robust_error(model, split, &[spec], n, cfg.batch_size)?;
    Ok((Some(r.clean_error), Some(r.robust_error)))
}

/// Mean clean cross-entropy over the first `n` examples (eval mode).
pub fn clean_loss(model: &Model, split: &DatasetSplit, n: usize, batch_size: usize) -> Result<f64> {
    let mut sum = 0.0f64;
    for idx in BatchIter::sequential(n, batch_size.max(1)) {
        let b = split.batch(&idx);
        let logits = model.logits(&b.images)?;
        sum += per_example_cross_entropy(&logits, &b.labels)?
            .iter()
            .map(|&v| f64::from(v))
            .sum::<f64>();
    }
    Ok(sum / n as f64)
}

/// Percentage of the first `n` examples the model misclassifies.
pub fn clean_error(model: &Model, split: &DatasetSplit, n: usize, batch_size: usize) -> Result<f64> {
    let mut wrong = 0usize;
    for idx in BatchIter::sequential(n, batch_size.max(1)) {
        let b = split.batch(&idx);
        let pred = argmax_rows(&model.logits(&b.images)?);
        wrong += pred.iter().zip(&b.labels).filter(|(p, y)| p != y).count();
    }
    Ok(100.0 * wrong as f64 / n as f64)
}
