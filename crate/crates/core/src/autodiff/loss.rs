use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax of a `[N, K]` matrix, stabilized by max subtraction.
pub fn softmax_rows(logits: &[f32], k: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|&z| (z - max).exp()).collect();
        let total: f32 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy labels",
            lhs: vec![n, k],
            rhs: vec![labels.len()],
        });
    }
    match labels.iter().find(|&&y| y >= k) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes: k }),
        None => Ok(()),
    }
}

/// Per-example `−log softmax(z)[y]` computed as `logsumexp(z) − z_y`.
pub fn per_example_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Vec<f32>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::InvalidShape(format!("cross_entropy logits {s:?}")));
    }
    let (n, k) = (s[0], s[1]);
    check_labels(labels, n, k)?;
    Ok(logits
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f32>().ln();
            lse - row[y]
        })
        .collect())
}

pub(super) fn cross_entropy_backward(
    probs: &[f32],
    labels: &[usize],
    weights: &[f32],
    k: usize,
    up: f32,
) -> Vec<f32> {
    let n = labels.len() as f32;
    let mut g = probs.to_vec();
    for (i, row) in g.chunks_mut(k).enumerate() {
        row[labels[i]] -= 1.0;
        let s = up * weights[i] / n;
        row.iter_mut().for_each(|v| *v *= s);
    }
    g
}

impl Tape {
    /// Mean cross-entropy over the batch.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let n = labels.len();
        self.weighted_cross_entropy(logits, labels, &vec![1.0; n])
    }

    /// `(1/N) Σᵢ wᵢ · CE(logitsᵢ, yᵢ)`. A weight of −1 turns an example's
    /// term into a targeted objective when maximized.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[f32],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let per = per_example_cross_entropy(lv, labels)?;
        if weights.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy weights",
                lhs: vec![labels.len()],
                rhs: vec![weights.len()],
            });
        }
        let k = lv.shape()[1];
        let loss = per.iter().zip(weights).map(|(l, w)| l * w).sum::<f32>() / labels.len() as f32;
        let probs = softmax_rows(lv.data(), k);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        )
    }
}
