//! Models as a named parameter store plus an ordered layer program.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::batchnorm::{update_running, BatchNormLayer, Mode, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
use crate::autodiff::{BatchStats, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pre-activation CIFAR-style ResNet of depth `6n + 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    /// Residual blocks per stage (`n`).
    pub depth_n: usize,
    /// Channel width of each stage; stages after the first halve the
    /// spatial resolution.
    pub widths: Vec<usize>,
    pub in_channels: usize,
    pub num_classes: usize,
    pub bn_eps: f32,
    pub bn_momentum: f32,
}

impl ResNetConfig {
    pub fn resnet20(in_channels: usize, num_classes: usize) -> Self {
        ResNetConfig {
            depth_n: 3,
            widths: vec![16, 32, 64],
            in_channels,
            num_classes,
            bn_eps: DEFAULT_BN_EPS,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn micro(widths: &[usize], in_channels: usize, num_classes: usize) -> Self {
        ResNetConfig {
            depth_n: 1,
            widths: widths.to_vec(),
            ..Self::resnet20(in_channels, num_classes)
        }
    }

    /// Number of weighted layers (convolutions plus the logit layer).
    pub fn depth(&self) -> usize {
        2 * self.depth_n * self.widths.len() + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.depth_n == 0 {
            return bad("depth_n must be at least 1".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("invalid stage widths {:?}", self.widths));
        }
        if self.widths.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("stage widths {:?} must be non-decreasing", self.widths));
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return bad("need at least one input channel and two classes".into());
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("batch norm eps must be > 0 and momentum in (0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    ResNet(ResNetConfig),
    /// Single affine layer on flattened `[C, H, W]` inputs; no batch norm.
    Linear {
        input_shape: [usize; 3],
        num_classes: usize,
    },
}

impl Architecture {
    pub fn num_classes(&self) -> usize {
        match self {
            Architecture::ResNet(cfg) => cfg.num_classes,
            Architecture::Linear { num_classes, .. } => *num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    LinearBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    /// Running statistics are state, not parameters: never trained by SGD.
    pub fn is_statistic(self) -> bool {
        matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    pub fn is_bn_param(self) -> bool {
        matches!(self, ParamKind::BnGamma | ParamKind::BnBeta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Parameter groups addressed by the freezing configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Selector {
    /// Every stored array, including running statistics.
    All,
    BnParams,
    BnStats,
    /// Final linear layer (weight and bias).
    Logit,
    /// First convolution kernel.
    Conv1,
}

#[derive(Debug, Clone)]
struct BnSlots {
    name: String,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

/// One step of the forward program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerOp {
    Conv { weight: usize, stride: usize },
    BatchNorm { layer: usize },
    Relu,
    /// Pushes the current activation as a residual source.
    SaveResidual,
    /// Pops the residual source, applies the parameter-free shortcut
    /// (2×2 average pool when `stride == 2`, zero channel padding up to
    /// `channels`) and adds it to the current activation.
    AddResidual { stride: usize, channels: usize },
    GlobalAvgPool,
    Flatten,
    Linear { weight: usize, bias: usize },
}

/// Result of a forward pass recorded on a tape.
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// `(array index, leaf)` for every parameter that receives a gradient.
    pub bindings: Vec<(usize, Var)>,
    /// Batch statistics measured by each train-mode batch-norm layer.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    arch: Architecture,
    arrays: Vec<NamedArray>,
    index: HashMap<String, usize>,
    bn: Vec<BnSlots>,
    program: Vec<LayerOp>,
    bn_eps: f32,
    bn_momentum: f32,
    mode: Mode,
}

struct Builder {
    arrays: Vec<NamedArray>,
    bn: Vec<BnSlots>,
    program: Vec<LayerOp>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, kind: ParamKind, tensor: Tensor) -> usize {
        let requires_grad = !kind.is_statistic();
        self.arrays.push(NamedArray {
            name,
            kind,
            tensor: tensor.with_requires_grad(requires_grad),
        });
        self.arrays.len() - 1
    }

    fn he_normal(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng) as f32).collect();
        Tensor::new(shape.to_vec(), data).expect("consistent shape")
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, stride: usize) {
        let w = self.he_normal(&[cout, cin, 3, 3], cin * 9);
        let weight = self.push(format!("{name}.weight"), ParamKind::ConvWeight, w);
        self.program.push(LayerOp::Conv { weight, stride });
    }

    fn batch_norm(&mut self, name: &str, channels: usize) {
        let gamma = self.push(format!("{name}.gamma"), ParamKind::BnGamma, Tensor::full(&[channels], 1.0));
        let beta = self.push(format!("{name}.beta"), ParamKind::BnBeta, Tensor::zeros(&[channels]));
        let mean = self.push(
            format!("{name}.running_mean"),
            ParamKind::BnRunningMean,
            Tensor::zeros(&[channels]),
        );
        let var = self.push(
            format!("{name}.running_var"),
            ParamKind::BnRunningVar,
            Tensor::full(&[channels], 1.0),
        );
        self.bn.push(BnSlots {
            name: name.to_string(),
            gamma,
            beta,
            mean,
            var,
        });
        self.program.push(LayerOp::BatchNorm {
            layer: self.bn.len() - 1,
        });
    }

    fn linear(&mut self, name: &str, inputs: usize, outputs: usize) {
        let w = self.he_normal(&[outputs, inputs], inputs);
        let weight = self.push(format!("{name}.weight"), ParamKind::LinearWeight, w);
        let bias = self.push(format!("{name}.bias"), ParamKind::LinearBias, Tensor::zeros(&[outputs]));
        self.program.push(LayerOp::Linear { weight, bias });
    }
}

/// Builds a pre-activation ResNet: an initial 3×3 convolution, then per
/// block `BN → ReLU → conv → BN → ReLU → conv` plus a parameter-free
/// shortcut, and finally `BN → ReLU → global average pool → linear`.
/// Convolution and linear weights use He fan-in Gaussian initialization.
pub fn build_resnet(cfg: &ResNetConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut b = Builder {
        arrays: Vec::new(),
        bn: Vec::new(),
        program: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    b.conv("conv1", cfg.in_channels, cfg.widths[0], 1);
    let mut channels = cfg.widths[0];
    for (s, &width) in cfg.widths.iter().enumerate() {
        for blk in 0..cfg.depth_n {
            let stride = if s > 0 && blk == 0 { 2 } else { 1 };
            let prefix = format!("stage{}.block{}", s + 1, blk + 1);
            b.program.push(LayerOp::SaveResidual);
            b.batch_norm(&format!("{prefix}.bn1"), channels);
            b.program.push(LayerOp::Relu);
            b.conv(&format!("{prefix}.conv1"), channels, width, stride);
            b.batch_norm(&format!("{prefix}.bn2"), width);
            b.program.push(LayerOp::Relu);
            b.conv(&format!("{prefix}.conv2"), width, width, 1);
            b.program.push(LayerOp::AddResidual {
                stride,
                channels: width,
            });
            channels = width;
        }
    }
    b.batch_norm("bn_final", channels);
    b.program.push(LayerOp::Relu);
    b.program.push(LayerOp::GlobalAvgPool);
    b.linear("logit", channels, cfg.num_classes);
    Ok(Model::assemble(Architecture::ResNet(cfg.clone()), b, cfg.bn_eps, cfg.bn_momentum))
}

/// Linear classifier on flattened inputs (no batch norm).
pub fn build_linear(input_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<Model> {
    if input_shape.contains(&0) || num_classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "linear model on {input_shape:?} with {num_classes} classes"
        )));
    }
    let mut b = Builder {
        arrays: Vec::new(),
        bn: Vec::new(),
        program: vec![LayerOp::Flatten],
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    b.linear("logit", input_shape.iter().product(), num_classes);
    Ok(Model::assemble(
        Architecture::Linear {
            input_shape,
            num_classes,
        },
        b,
        DEFAULT_BN_EPS,
        DEFAULT_BN_MOMENTUM,
    ))
}

/// Builds the model described by `arch` with freshly initialized weights.
pub fn build(arch: &Architecture, seed: u64) -> Result<Model> {
    match arch {
        Architecture::ResNet(cfg) => build_resnet(cfg, seed),
        Architecture::Linear {
            input_shape,
            num_classes,
        } => build_linear(*input_shape, *num_classes, seed),
    }
}

impl Model {
    fn assemble(arch: Architecture, b: Builder, bn_eps: f32, bn_momentum: f32) -> Self {
        let index = b
            .arrays
            .iter()
            .enumerate()
            .map(|(i, a)| (a.name.clone(), i))
            .collect();
        Model {
            arch,
            arrays: b.arrays,
            index,
            bn: b.bn,
            program: b.program,
            bn_eps,
            bn_momentum,
            mode: Mode::Train,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn program(&self) -> &[LayerOp] {
        &self.program
    }

    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [NamedArray] {
        &mut self.arrays
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|a| a.name.as_str())
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.position(name)
            .map(|i| &self.arrays[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self
            .position(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        Ok(&mut self.arrays[i].tensor)
    }

    /// Names selected by `selector`, in storage order.
    pub fn enumerate_params(&self, selector: Selector) -> Vec<String> {
        let logit_names: Vec<usize> = self
            .program
            .iter()
            .rev()
            .find_map(|op| match op {
                LayerOp::Linear { weight, bias } => Some(vec![*weight, *bias]),
                _ => None,
            })
            .unwrap_or_default();
        let conv1 = self.program.iter().find_map(|op| match op {
            LayerOp::Conv { weight, .. } => Some(*weight),
            _ => None,
        });
        self.arrays
            .iter()
            .enumerate()
            .filter(|(i, a)| match selector {
                Selector::All => true,
                Selector::BnParams => a.kind.is_bn_param(),
                Selector::BnStats => a.kind.is_statistic(),
                Selector::Logit => logit_names.contains(i),
                Selector::Conv1 => conv1 == Some(*i),
            })
            .map(|(_, a)| a.name.clone())
            .collect()
    }

    /// Learnable scalars (running statistics excluded).
    pub fn num_parameters(&self) -> usize {
        self.arrays
            .iter()
            .filter(|a| !a.kind.is_statistic())
            .map(|a| a.tensor.numel())
            .sum()
    }

    pub fn num_bn_layers(&self) -> usize {
        self.bn.len()
    }

    pub fn bn_layer_names(&self) -> Vec<String> {
        self.bn.iter().map(|b| b.name.clone()).collect()
    }

    /// Snapshot of batch-norm layer `i` (in forward order).
    pub fn bn_layer(&self, i: usize) -> BatchNormLayer {
        let s = &self.bn[i];
        BatchNormLayer {
            gamma: self.arrays[s.gamma].tensor.data().to_vec(),
            beta: self.arrays[s.beta].tensor.data().to_vec(),
            running_mean: self.arrays[s.mean].tensor.data().to_vec(),
            running_var: self.arrays[s.var].tensor.data().to_vec(),
            eps: self.bn_eps,
            momentum: self.bn_momentum,
            mode: self.mode,
        }
    }

    /// Running mean ← 0 and running variance ← 1 in every batch-norm layer.
    pub fn reset_bn_statistics(&mut self) {
        for s in &self.bn {
            self.arrays[s.mean].tensor.data_mut().fill(0.0);
            self.arrays[s.var].tensor.data_mut().fill(1.0);
        }
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (layer, st) in stats {
            let s = &self.bn[*layer];
            let (mean, var) = (s.mean, s.var);
            update_running(self.arrays[mean].tensor.data_mut(), &st.mean, self.bn_momentum);
            update_running(self.arrays[var].tensor.data_mut(), &st.var, self.bn_momentum);
        }
    }

    pub fn zero_grads(&mut self) {
        self.arrays.iter_mut().for_each(|a| a.tensor.zero_grad());
    }

    /// Adds leaf gradients from a backward pass into the parameter tensors.
    pub fn accumulate_grads(&mut self, grads: &Gradients, bindings: &[(usize, Var)]) -> Result<()> {
        for &(i, var) in bindings {
            grads.accumulate_into(var, &mut self.arrays[i].tensor)?;
        }
        Ok(())
    }

    /// Whether both models have the same architecture and array layout.
    pub fn same_topology(&self, other: &Model) -> bool {
        self.arch == other.arch
            && self.arrays.len() == other.arrays.len()
            && self
                .arrays
                .iter()
                .zip(&other.arrays)
                .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.tensor.shape() == b.tensor.shape())
    }

    /// Records the forward pass of `x` on `tape` in the current mode.
    ///
    /// Parameters are recorded as leaves that require gradients iff
    /// `param_grads` is set and the parameter's own flag is set. Train-mode
    /// batch statistics are returned, not applied.
    pub fn forward(&self, tape: &mut Tape, x: Var, param_grads: bool) -> Result<Forward> {
        let mut leaves: HashMap<usize, Var> = HashMap::new();
        let mut bindings = Vec::new();
        let mut batch_stats = Vec::new();
        let mut leaf = |tape: &mut Tape, i: usize, bindings: &mut Vec<(usize, Var)>| -> Var {
            *leaves.entry(i).or_insert_with(|| {
                let t = &self.arrays[i].tensor;
                let wants = param_grads && t.requires_grad();
                let v = tape.leaf_owned(t.clone(), wants);
                if wants {
                    bindings.push((i, v));
                }
                v
            })
        };

        let mut h = x;
        let mut residuals: Vec<Var> = Vec::new();
        for op in &self.program {
            h = match *op {
                LayerOp::Conv { weight, stride } => {
                    let w = leaf(tape, weight, &mut bindings);
                    tape.conv2d(h, w, stride, 1)?
                }
                LayerOp::BatchNorm { layer } => {
                    let s = &self.bn[layer];
                    let g = leaf(tape, s.gamma, &mut bindings);
                    let b = leaf(tape, s.beta, &mut bindings);
                    match self.mode {
                        Mode::Train => {
                            let (y, stats) = tape.batch_norm_train(h, g, b, self.bn_eps)?;
                            batch_stats.push((layer, stats));
                            y
                        }
                        Mode::Eval => tape.batch_norm_eval(
                            h,
                            g,
                            b,
                            self.arrays[s.mean].tensor.data(),
                            self.arrays[s.var].tensor.data(),
                            self.bn_eps,
                        )?,
                    }
                }
                LayerOp::Relu => tape.relu(h)?,
                LayerOp::SaveResidual => {
                    residuals.push(h);
                    h
                }
                LayerOp::AddResidual { stride, channels } => {
                    let mut sc = residuals.pop().ok_or_else(|| {
                        Error::InvalidConfig("residual add without a saved source".into())
                    })?;
                    if stride == 2 {
                        sc = tape.avg_pool2(sc)?;
                    }
                    if tape.value(sc).shape()[1] < channels {
                        sc = tape.pad_channels(sc, channels)?;
                    }
                    if tape.value(sc).shape() != tape.value(h).shape() {
                        return Err(Error::ShapeMismatch {
                            op: "residual add",
                            lhs: tape.value(h).shape().to_vec(),
                            rhs: tape.value(sc).shape().to_vec(),
                        });
                    }
                    tape.add(h, sc)?
                }
                LayerOp::GlobalAvgPool => tape.global_avg_pool(h)?,
                LayerOp::Flatten => {
                    let s = tape.value(h).shape().to_vec();
                    let n = s[0];
                    let d: usize = s[1..].iter().product();
                    tape.reshape(h, &[n, d])?
                }
                LayerOp::Linear { weight, bias } => {
                    let w = leaf(tape, weight, &mut bindings);
                    let b = leaf(tape, bias, &mut bindings);
                    tape.linear(h, w, Some(b))?
                }
            };
        }
        Ok(Forward {
            logits: h,
            bindings,
            batch_stats,
        })
    }

    /// Train-mode forward that folds batch statistics into the running
    /// estimates iff `update_stats`.
    pub fn forward_train(&mut self, tape: &mut Tape, x: Var, update_stats: bool) -> Result<Forward> {
        let mode = self.mode;
        self.mode = Mode::Train;
        let out = self.forward(tape, x, true);
        self.mode = mode;
        let out = out?;
        if update_stats {
            self.apply_batch_stats(&out.batch_stats);
        }
        Ok(out)
    }

    /// Logits for `images` in the current mode, without gradients.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let f = self.forward(&mut tape, x, false)?;
        Ok(tape.value(f.logits).clone())
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(images)?))
    }
}

/// Index of the largest entry in each row of a `[N, K]` tensor (first on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Anything that maps an image batch to logits on a tape. Attacks are
/// written against this trait so they can target toy models in tests.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    /// Attacks refuse to run unless this holds.
    fn is_eval(&self) -> bool;

    /// Records logits for `input` without parameter gradients.
    fn logits_on(&self, tape: &mut Tape, input: Var) -> Result<Var>;
}

impl Classifier for Model {
    fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    fn is_eval(&self) -> bool {
        self.mode == Mode::Eval
    }

    fn logits_on(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        Ok(self.forward(tape, input, false)?.logits)
    }
}
