//! Freeze soundness: train every named configuration briefly and compare
//! each stored array with its starting value.

use bnrobust::attacks::AttackSpec;
use bnrobust::data::{gaussian_blobs, BlobSpec, DatasetSplit, SplitTag};
use bnrobust::nn::{build_resnet, Model, ParamKind, ResNetConfig};
use bnrobust::training::{make_freeze_mask, train, ConfigName, LrSchedule, TrainConfig};

/// What happened to one configuration's arrays.
#[derive(Debug, Clone)]
pub struct FreezeOutcome {
    pub label: String,
    /// Learnable arrays the mask freezes that changed (must be empty).
    pub moved_frozen: Vec<String>,
    /// Trainable arrays that did not change.
    pub stuck_trainable: Vec<String>,
    pub update_bn_stats: bool,
    /// Whether any running statistic changed.
    pub stats_changed: bool,
    /// Running statistics that changed although frozen, or stayed put
    /// although updating (must be empty).
    pub stats_wrong: Vec<String>,
}

impl FreezeOutcome {
    pub fn sound(&self) -> bool {
        self.moved_frozen.is_empty() && self.stats_wrong.is_empty() && self.stats_changed == self.update_bn_stats
    }
}

pub fn freeze_data() -> DatasetSplit {
    let spec = BlobSpec {
        num_classes: 3,
        shape: [1, 8, 8],
        separation: 0.4,
        noise_std: 0.1,
        center_seed: 21,
    };
    gaussian_blobs(&spec, 16, 22, SplitTag::Train).unwrap()
}

pub fn freeze_model() -> Model {
    build_resnet(&ResNetConfig::micro(&[2, 4, 4], 1, 3), 23).unwrap()
}

pub fn freeze_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        lr_schedule: LrSchedule::constant(0.05),
        inner_attack: AttackSpec::pgd(0.1, 2),
        seed: 24,
        ..TrainConfig::from_scratch(0.1)
    }
}

fn bits(m: &Model, name: &str) -> Vec<u32> {
    m.array(name).unwrap().tensor.data().iter().map(|v| v.to_bits()).collect()
}

/// Trains `config` (adversarially unless it is `normal`) for `epochs` and
/// classifies every array as expected or not.
pub fn check_config(config: ConfigName, plus_logit: bool, plus_conv1: bool, epochs: usize) -> FreezeOutcome {
    let data = freeze_data();
    let start = freeze_model();
    let mut model = start.clone();
    let mask = make_freeze_mask(&model, config, plus_logit, plus_conv1);
    let adversarial = config != ConfigName::Normal;
    train(&mut model, &data, &mask, &freeze_train_config(epochs), adversarial).unwrap();

    let mut out = FreezeOutcome {
        label: format!(
            "{config}{}{}",
            if plus_logit { "+logit" } else { "" },
            if plus_conv1 { "+conv1" } else { "" }
        ),
        moved_frozen: Vec::new(),
        stuck_trainable: Vec::new(),
        update_bn_stats: mask.update_bn_stats,
        stats_changed: false,
        stats_wrong: Vec::new(),
    };
    for a in start.arrays() {
        let changed = bits(&start, &a.name) != bits(&model, &a.name);
        if matches!(a.kind, ParamKind::BnRunningMean | ParamKind::BnRunningVar) {
            out.stats_changed |= changed;
            if changed != mask.update_bn_stats {
                out.stats_wrong.push(a.name.clone());
            }
        } else if mask.is_trainable(&a.name) {
            if !changed {
                out.stuck_trainable.push(a.name.clone());
            }
        } else if changed {
            out.moved_frozen.push(a.name.clone());
        }
    }
    out
}

/// Every named configuration with every combination of the plus flags.
pub fn all_configs(epochs: usize) -> Vec<FreezeOutcome> {
    let mut v = Vec::new();
    for config in ConfigName::ALL {
        for (pl, pc) in [(false, false), (true, false), (false, true), (true, true)] {
            v.push(check_config(config, pl, pc, epochs));
        }
    }
    v
}
