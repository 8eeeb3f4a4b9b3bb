//! Experiment configuration: flat `section.key = value` text.
//!
//! Every key has a default, `#` starts a comment, and blank lines are
//! ignored. Attack radii are exact rationals (`8/255`) or decimals and are
//! converted to `f32` once. [`ExperimentConfig::to_text`] writes the fully
//! resolved configuration back in the same syntax.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attacks::{default_ensemble, AttackSpec, Objective};
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::nn::{Architecture, ResNetConfig};
use crate::training::{ConfigName, LrSchedule, TrainConfig};

/// A non-negative rational written `p/q`, or a decimal literal.
#[derive(Debug, Clone, PartialEq)]
pub struct Rational {
    text: String,
    value: f64,
}

impl Rational {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn as_f32(&self) -> f32 {
        self.value as f32
    }
}

impl FromStr for Rational {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidConfig(format!("`{s}` is not a non-negative rational"));
        let value = match s.split_once('/') {
            Some((p, q)) => {
                let p: u64 = p.trim().parse().map_err(|_| bad())?;
                let q: u64 = q.trim().parse().map_err(|_| bad())?;
                if q == 0 {
                    return Err(bad());
                }
                p as f64 / q as f64
            }
            None => s.parse::<f64>().map_err(|_| bad())?,
        };
        if !(value >= 0.0 && value.is_finite()) {
            return Err(bad());
        }
        Ok(Rational {
            text: s.to_string(),
            value,
        })
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// IDX files in the MNIST layout (also used for the 8×8 digits export).
    Mnist,
    Cifar10,
    /// Gaussian blobs generated from the `synthetic.*` keys.
    Synthetic,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" | "idx" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "synthetic" => Ok(DatasetKind::Synthetic),
            _ => Err(Error::InvalidConfig(format!("unknown dataset `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    /// Use only the first `train_n` training examples (0 = all).
    pub train_n: usize,
    pub synthetic_classes: usize,
    pub synthetic_shape: [usize; 3],
    pub synthetic_separation: f32,
    pub synthetic_noise: f32,
    pub synthetic_train_per_class: usize,
    pub synthetic_test_per_class: usize,
    pub synthetic_seed: u64,

    /// `None` selects a linear classifier instead of a ResNet.
    pub resnet_n: Option<usize>,
    pub widths: Vec<usize>,
    pub model_seed: u64,

    pub config_name: ConfigName,
    pub plus_logit: bool,
    pub plus_conv1: bool,
    pub reset_stats: bool,
    /// `None`: adversarial for every configuration except `normal`.
    pub adversarial: Option<bool>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub train_seed: u64,
    pub augment: bool,
    pub augment_pad: usize,
    pub monitor_n: usize,

    pub epsilon: Rational,
    pub attack_steps: usize,
    /// `None`: `ε/4`.
    pub attack_step_size: Option<Rational>,
    pub attack_restarts: usize,

    /// Ensemble members by label (`pgd50x5`, `pgd50x5-runner_up`, `rs5000`,
    /// `fgsm`), or the single entry `default`.
    pub ensemble: Vec<String>,
    pub eval_n: usize,
    pub eval_batch_size: usize,
    pub eval_seed: u64,

    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Mnist,
            data_dir: None,
            train_n: 0,
            synthetic_classes: 2,
            synthetic_shape: [1, 8, 8],
            synthetic_separation: 0.5,
            synthetic_noise: 0.05,
            synthetic_train_per_class: 200,
            synthetic_test_per_class: 100,
            synthetic_seed: 0,
            resnet_n: Some(1),
            widths: vec![8, 16, 32],
            model_seed: 0,
            config_name: ConfigName::Normal,
            plus_logit: false,
            plus_conv1: false,
            reset_stats: false,
            adversarial: None,
            epochs: 20,
            batch_size: 64,
            lr: 0.1,
            lr_milestones: vec![10, 15],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            train_seed: 0,
            augment: false,
            augment_pad: 4,
            monitor_n: 0,
            epsilon: "8/255".parse().expect("valid literal"),
            attack_steps: 10,
            attack_step_size: None,
            attack_restarts: 1,
            ensemble: vec!["default".into()],
            eval_n: 1000,
            eval_batch_size: 100,
            eval_seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Parses one ensemble label at radius `epsilon`.
pub fn parse_attack_label(label: &str, epsilon: f32, seed: u64) -> Result<AttackSpec> {
    let bad = || Error::InvalidConfig(format!("unknown attack `{label}`"));
    let (body, objective) = match label.strip_suffix("-runner_up") {
        Some(b) => (b, Objective::RunnerUp),
        None => (label, Objective::Untargeted),
    };
    let spec = if body == "fgsm" {
        AttackSpec::fgsm(epsilon)
    } else if let Some(rest) = body.strip_prefix("pgd") {
        let (steps, restarts) = rest.split_once('x').ok_or_else(bad)?;
        AttackSpec::pgd(epsilon, steps.parse().map_err(|_| bad())?)
            .with_restarts(restarts.parse().map_err(|_| bad())?)
    } else if let Some(q) = body.strip_prefix("rs") {
        if objective != Objective::Untargeted {
            return Err(bad());
        }
        AttackSpec::random_search(epsilon, q.parse().map_err(|_| bad())?)
    } else {
        return Err(bad());
    };
    let spec = spec.with_objective(objective).with_seed(seed);
    spec.validate()?;
    Ok(spec)
}

impl ExperimentConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data.dataset" => self.dataset = v.parse()?,
            "data.dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.train_n" => self.train_n = parse(key, v)?,
            "synthetic.classes" => self.synthetic_classes = parse(key, v)?,
            "synthetic.shape" => {
                let s: Vec<usize> = parse_list(key, v)?;
                self.synthetic_shape = s
                    .try_into()
                    .map_err(|_| Error::InvalidConfig(format!("`{key}` needs three extents")))?;
            }
            "synthetic.separation" => self.synthetic_separation = parse(key, v)?,
            "synthetic.noise" => self.synthetic_noise = parse(key, v)?,
            "synthetic.train_per_class" => self.synthetic_train_per_class = parse(key, v)?,
            "synthetic.test_per_class" => self.synthetic_test_per_class = parse(key, v)?,
            "synthetic.seed" => self.synthetic_seed = parse(key, v)?,
            "model.arch" => match v {
                "linear" => self.resnet_n = None,
                "resnet" => self.resnet_n = Some(self.resnet_n.unwrap_or(1)),
                _ => return Err(Error::InvalidConfig(format!("unknown architecture `{v}`"))),
            },
            "model.n" => self.resnet_n = Some(parse(key, v)?),
            "model.widths" => self.widths = parse_list(key, v)?,
            "model.seed" => self.model_seed = parse(key, v)?,
            "train.config_name" => self.config_name = v.parse()?,
            "train.plus_logit" => self.plus_logit = parse(key, v)?,
            "train.plus_conv1" => self.plus_conv1 = parse(key, v)?,
            "train.reset_stats" => self.reset_stats = parse(key, v)?,
            "train.adversarial" => {
                self.adversarial = match v {
                    "auto" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.lr_milestones" => self.lr_milestones = parse_list(key, v)?,
            "train.lr_decay" => self.lr_decay = parse(key, v)?,
            "train.momentum" => self.momentum = parse(key, v)?,
            "train.weight_decay" => self.weight_decay = parse(key, v)?,
            "train.seed" => self.train_seed = parse(key, v)?,
            "train.augment" => self.augment = parse(key, v)?,
            "train.augment_pad" => self.augment_pad = parse(key, v)?,
            "train.monitor_n" => self.monitor_n = parse(key, v)?,
            "attack.epsilon" => self.epsilon = v.parse()?,
            "attack.steps" => self.attack_steps = parse(key, v)?,
            "attack.step_size" => {
                self.attack_step_size = match v {
                    "auto" => None,
                    _ => Some(v.parse()?),
                }
            }
            "attack.restarts" => self.attack_restarts = parse(key, v)?,
            "eval.ensemble" => self.ensemble = parse_list(key, v)?,
            "eval.n" => self.eval_n = parse(key, v)?,
            "eval.batch_size" => self.eval_batch_size = parse(key, v)?,
            "eval.seed" => self.eval_seed = parse(key, v)?,
            "output.dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::InvalidConfig(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::InvalidConfig(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            self.set(key, value)
                .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// The resolved configuration, one `key = value` per line, in a fixed
    /// order; parsing it back yields an equal configuration.
    pub fn to_text(&self) -> String {
        let opt = |o: &Option<Rational>| o.as_ref().map_or("auto".to_string(), ToString::to_string);
        let lines: Vec<(&str, String)> = vec![
            ("data.dataset", self.dataset.as_str().into()),
            (
                "data.dir",
                self.data_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
            ),
            ("data.train_n", self.train_n.to_string()),
            ("synthetic.classes", self.synthetic_classes.to_string()),
            ("synthetic.shape", join(&self.synthetic_shape)),
            ("synthetic.separation", self.synthetic_separation.to_string()),
            ("synthetic.noise", self.synthetic_noise.to_string()),
            ("synthetic.train_per_class", self.synthetic_train_per_class.to_string()),
            ("synthetic.test_per_class", self.synthetic_test_per_class.to_string()),
            ("synthetic.seed", self.synthetic_seed.to_string()),
            ("model.arch", if self.resnet_n.is_some() { "resnet" } else { "linear" }.into()),
            ("model.n", self.resnet_n.unwrap_or(1).to_string()),
            ("model.widths", join(&self.widths)),
            ("model.seed", self.model_seed.to_string()),
            ("train.config_name", self.config_name.to_string()),
            ("train.plus_logit", self.plus_logit.to_string()),
            ("train.plus_conv1", self.plus_conv1.to_string()),
            ("train.reset_stats", self.reset_stats.to_string()),
            (
                "train.adversarial",
                self.adversarial.map_or("auto".into(), |a| a.to_string()),
            ),
            ("train.epochs", self.epochs.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.lr_milestones", join(&self.lr_milestones)),
            ("train.lr_decay", self.lr_decay.to_string()),
            ("train.momentum", self.momentum.to_string()),
            ("train.weight_decay", self.weight_decay.to_string()),
            ("train.seed", self.train_seed.to_string()),
            ("train.augment", self.augment.to_string()),
            ("train.augment_pad", self.augment_pad.to_string()),
            ("train.monitor_n", self.monitor_n.to_string()),
            ("attack.epsilon", self.epsilon.to_string()),
            ("attack.steps", self.attack_steps.to_string()),
            ("attack.step_size", opt(&self.attack_step_size)),
            ("attack.restarts", self.attack_restarts.to_string()),
            ("eval.ensemble", self.ensemble.join(",")),
            ("eval.n", self.eval_n.to_string()),
            ("eval.batch_size", self.eval_batch_size.to_string()),
            ("eval.seed", self.eval_seed.to_string()),
            ("output.dir", self.out_dir.display().to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn is_adversarial(&self) -> bool {
        self.adversarial.unwrap_or(self.config_name != ConfigName::Normal)
    }

    pub fn architecture(&self, in_channels: usize, num_classes: usize, image: [usize; 3]) -> Result<Architecture> {
        let arch = match self.resnet_n {
            Some(n) => {
                let mut cfg = ResNetConfig::micro(&self.widths, in_channels, num_classes);
                cfg.depth_n = n;
                cfg.validate()?;
                Architecture::ResNet(cfg)
            }
            None => Architecture::Linear {
                input_shape: image,
                num_classes,
            },
        };
        Ok(arch)
    }

    pub fn inner_attack(&self) -> AttackSpec {
        let eps = self.epsilon.as_f32();
        let mut spec = AttackSpec::pgd(eps, self.attack_steps).with_restarts(self.attack_restarts);
        if let Some(s) = &self.attack_step_size {
            spec.step_size = s.as_f32();
        }
        spec
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut milestones = self.lr_milestones.clone();
        milestones.retain(|&m| m > 0);
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_schedule: LrSchedule::step_decay(self.lr, &milestones, self.lr_decay),
            sgd_momentum: self.momentum,
            weight_decay: self.weight_decay,
            inner_attack: self.inner_attack(),
            seed: self.train_seed,
            augment: self.augment.then_some(AugmentConfig {
                pad: self.augment_pad,
                flip: true,
            }),
            monitor_n: self.monitor_n,
        }
    }

    /// Evaluation ensemble at the configured radius; member `i` is seeded
    /// with `eval.seed + i`.
    pub fn eval_ensemble(&self) -> Result<Vec<AttackSpec>> {
        let eps = self.epsilon.as_f32();
        if self.ensemble.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        if self.ensemble.len() == 1 && self.ensemble[0] == "default" {
            return Ok(default_ensemble(eps)
                .into_iter()
                .map(|s| {
                    let seed = s.seed;
                    s.with_seed(self.eval_seed.wrapping_add(seed))
                })
                .collect());
        }
        self.ensemble
            .iter()
            .enumerate()
            .map(|(i, l)| parse_attack_label(l.trim(), eps, self.eval_seed.wrapping_add(i as u64)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.eval_ensemble()?;
        if self.eval_n == 0 || self.eval_batch_size == 0 {
            return Err(Error::InvalidConfig("eval.n and eval.batch_size must be positive".into()));
        }
        if self.epsilon.value() > 1.0 {
            return Err(Error::InvalidConfig(format!("epsilon {} exceeds 1", self.epsilon)));
        }
        Ok(())
    }
}
