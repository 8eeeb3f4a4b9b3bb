use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Model, Selector};

/// The named training configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigName {
    /// Everything trainable, clean data.
    Normal,
    /// Everything trainable, adversarial data.
    Adv,
    /// Only γ, β trainable from random init; everything else stays random.
    BnOnly,
    /// Nothing trainable; running statistics re-estimated.
    BnStats,
    /// γ, β trainable with running statistics frozen.
    BnOnlyParams,
    /// γ, β trainable and running statistics updated.
    BnParams,
}

impl ConfigName {
    pub const ALL: [ConfigName; 6] = [
        ConfigName::Normal,
        ConfigName::Adv,
        ConfigName::BnOnly,
        ConfigName::BnStats,
        ConfigName::BnOnlyParams,
        ConfigName::BnParams,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConfigName::Normal => "normal",
            ConfigName::Adv => "adv",
            ConfigName::BnOnly => "bn_only",
            ConfigName::BnStats => "bn_stats",
            ConfigName::BnOnlyParams => "bn_only_params",
            ConfigName::BnParams => "bn_params",
        }
    }
}

impl fmt::Display for ConfigName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConfigName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConfigName::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::UnknownConfigName(s.to_string()))
    }
}

/// Which parameters learn and whether batch-norm statistics adapt.
///
/// `trainable` has one entry per learnable array of the bound model;
/// running statistics are governed by `update_bn_stats` alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub trainable: BTreeMap<String, bool>,
    pub update_bn_stats: bool,
    pub reset_stats_first: bool,
}

impl FreezeMask {
    /// Free-form mask: exactly the named arrays are trainable.
    pub fn custom(model: &Model, trainable: &[&str], update_bn_stats: bool) -> Result<Self> {
        let mut mask = Self::uniform(model, false, update_bn_stats);
        for &name in trainable {
            match mask.trainable.get_mut(name) {
                Some(flag) => *flag = true,
                None => return Err(Error::UnknownParam(name.to_string())),
            }
        }
        Ok(mask)
    }

    fn uniform(model: &Model, value: bool, update_bn_stats: bool) -> Self {
        FreezeMask {
            trainable: model
                .arrays()
                .iter()
                .filter(|a| !a.kind.is_statistic())
                .map(|a| (a.name.clone(), value))
                .collect(),
            update_bn_stats,
            reset_stats_first: false,
        }
    }

    fn enable(&mut self, names: Vec<String>) {
        for n in names {
            self.trainable.insert(n, true);
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.get(name).copied().unwrap_or(false)
    }

    pub fn any_trainable(&self) -> bool {
        self.trainable.values().any(|&t| t)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().filter(|(_, &t)| t).map(|(n, _)| n.as_str())
    }

    /// Number of scalars the mask lets SGD change.
    pub fn trainable_count(&self, model: &Model) -> usize {
        model
            .arrays()
            .iter()
            .filter(|a| self.is_trainable(&a.name))
            .map(|a| a.tensor.numel())
            .sum()
    }

    /// Checks that the mask covers exactly the learnable arrays of `model`.
    pub fn check_bound(&self, model: &Model) -> Result<()> {
        let names: Vec<&str> = model
            .arrays()
            .iter()
            .filter(|a| !a.kind.is_statistic())
            .map(|a| a.name.as_str())
            .collect();
        if names.len() != self.trainable.len() || names.iter().any(|n| !self.trainable.contains_key(*n)) {
            return Err(Error::InvalidConfig("freeze mask does not match the model's parameters".into()));
        }
        Ok(())
    }

    /// Sets each array's gradient flag from the mask (statistics never).
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        self.check_bound(model)?;
        for a in model.arrays_mut() {
            let flag = !a.kind.is_statistic() && self.is_trainable(&a.name);
            a.tensor.set_requires_grad(flag);
        }
        Ok(())
    }
}

/// Builds the mask for one named configuration. `plus_logit` and
/// `plus_conv1` additionally unfreeze the final linear layer and the first
/// convolution.
pub fn make_freeze_mask(model: &Model, config: ConfigName, plus_logit: bool, plus_conv1: bool) -> FreezeMask {
    let mut mask = match config {
        ConfigName::Normal | ConfigName::Adv => FreezeMask::uniform(model, true, true),
        ConfigName::BnStats => FreezeMask::uniform(model, false, true),
        ConfigName::BnOnly | ConfigName::BnParams => {
            let mut m = FreezeMask::uniform(model, false, true);
            m.enable(model.enumerate_params(Selector::BnParams));
            m
        }
        ConfigName::BnOnlyParams => {
            let mut m = FreezeMask::uniform(model, false, false);
            m.enable(model.enumerate_params(Selector::BnParams));
            m
        }
    };
    if plus_logit {
        mask.enable(model.enumerate_params(Selector::Logit));
    }
    if plus_conv1 {
        mask.enable(model.enumerate_params(Selector::Conv1));
    }
    mask
}
