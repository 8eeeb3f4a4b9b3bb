//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every op executed during one forward pass. Values are
//! stored on the tape and addressed through [`Var`] handles. Calling
//! [`Tape::backward`] walks the record in reverse exactly once and returns the
//! gradients of every leaf that requires them; the tape cannot be
//! back-propagated a second time.

mod conv;
mod elementwise;
mod loss;
mod norm;
mod pool;

pub use conv::{conv2d_output_size, gemm};
pub use loss::{per_example_cross_entropy, softmax_rows};
pub use norm::{eval_affine_coefficients, BatchStats};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f32),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    AvgPool2(Var),
    PadChannels(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f32>,
        probs: Vec<f32>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNormTrain { .. } => "batch_norm_train",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::AvgPool2(..) => "avg_pool2",
            Op::PadChannels(..) => "pad_channels",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Reshape(..) => "reshape",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` (if any) into `tensor`'s gradient slot.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

impl Tape {
    /// New tape. Finite-value checks after every op are on in debug builds.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records a copy of `tensor` as a leaf; it receives a gradient iff the
    /// tensor's `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let value = Tensor::from_slice(tensor.shape(), tensor.data()).expect("valid tensor");
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    /// Records an owned leaf value.
    pub fn leaf_owned(&mut self, tensor: Tensor, requires_grad: bool) -> Var {
        let mut value = tensor;
        value.zero_grad();
        value.set_requires_grad(false);
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf_owned(tensor, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite {
            value.check_finite(op.name())?;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    /// Back-propagates from the scalar `loss`, consuming the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &upstream, &mut grads)?;
        }

        for (idx, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn backward_node(
        &self,
        idx: usize,
        up: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, up.to_vec());
                }
                if self.wants(*b) {
                    let n = self.value(*b).numel();
                    accumulate(grads, *b, elementwise::reduce_broadcast(up, n));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, up.to_vec());
                }
                if self.wants(*b) {
                    let n = self.value(*b).numel();
                    let mut g = elementwise::reduce_broadcast(up, n);
                    g.iter_mut().for_each(|v| *v = -*v);
                    accumulate(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    accumulate(grads, *a, elementwise::mul_broadcast(up, bv));
                }
                if self.wants(*b) {
                    let prod = elementwise::mul_same(up, av);
                    accumulate(grads, *b, elementwise::reduce_broadcast(&prod, bv.len()));
                }
            }
            Op::AddScalar(a) => accumulate(grads, *a, up.to_vec()),
            Op::MulScalar(a, s) => accumulate(grads, *a, up.iter().map(|g| g * s).collect()),
            Op::Relu(a) => {
                let out = node.value.data();
                let g = up
                    .iter()
                    .zip(out)
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, g);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, vec![up[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, vec![up[0] / n as f32; n]);
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = conv::linear_backward(
                    self.value(*x),
                    self.value(*w),
                    up,
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = conv::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    up,
                    geom,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let g = norm::batch_norm_train_backward(
                    self.value(*x),
                    self.value(*gamma).data(),
                    mean,
                    inv_std,
                    up,
                    self.wants(*x),
                );
                if let Some(dx) = g.dx {
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, g.dgamma);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, g.dbeta);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let g = norm::batch_norm_eval_backward(
                    self.value(*x),
                    self.value(*gamma).data(),
                    mean,
                    inv_std,
                    up,
                    self.wants(*x),
                );
                if let Some(dx) = g.dx {
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, g.dgamma);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, g.dbeta);
                }
            }
            Op::AvgPool2(x) => {
                accumulate(grads, *x, pool::avg_pool2_backward(self.value(*x).shape(), up));
            }
            Op::PadChannels(x) => {
                let g = pool::pad_channels_backward(self.value(*x).shape(), node.value.shape(), up);
                accumulate(grads, *x, g);
            }
            Op::GlobalAvgPool(x) => {
                accumulate(
                    grads,
                    *x,
                    pool::global_avg_pool_backward(self.value(*x).shape(), up),
                );
            }
            Op::Reshape(x) => accumulate(grads, *x, up.to_vec()),
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                let k = self.value(*logits).shape()[1];
                accumulate(
                    grads,
                    *logits,
                    loss::cross_entropy_backward(probs, labels, weights, k, up[0]),
                );
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], var: Var, delta: Vec<f32>) {
    match &mut grads[var.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
        slot @ None => *slot = Some(delta),
    }
}
