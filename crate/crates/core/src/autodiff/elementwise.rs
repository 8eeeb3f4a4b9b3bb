use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `b` broadcasts against `a` when, after stripping its leading unit
/// dimensions, its shape equals the trailing dimensions of `a`.
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    let core: Vec<usize> = b.iter().copied().skip_while(|&d| d == 1).collect();
    if core.is_empty() {
        return true;
    }
    core.len() <= a.len() && a[a.len() - core.len()..] == core[..]
}

/// Sums `g` (shaped like the broadcast result) down to `n` values.
pub(super) fn reduce_broadcast(g: &[f32], n: usize) -> Vec<f32> {
    if n == g.len() {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

pub(super) fn mul_broadcast(g: &[f32], b: &[f32]) -> Vec<f32> {
    g.iter()
        .enumerate()
        .map(|(i, v)| v * b[i % b.len()])
        .collect()
}

pub(super) fn mul_same(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

impl Tape {
    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcastable(av.shape(), bv.shape()) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bd.len()]))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(out, op, &[a, b])
    }

    /// `a + b`, with `b` broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x + s).collect())?;
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect())?;
        self.push(out, Op::MulScalar(a, s), &[a])
    }

    /// Rectified linear unit. The derivative at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x.max(0.0)).collect())?;
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f32 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f32>() / v.numel() as f32;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }
}
