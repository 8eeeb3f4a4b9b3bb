use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        &[n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![],
        }),
    }
}

pub(super) fn avg_pool2_backward(in_shape: &[usize], dy: &[f32]) -> Vec<f32> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy[(plane * ho + oy) * wo + ox] * 0.25;
                for (dy_, dx_) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    dx[(plane * h + 2 * oy + dy_) * w + 2 * ox + dx_] += g;
                }
            }
        }
    }
    dx
}

pub(super) fn pad_channels_backward(in_shape: &[usize], out_shape: &[usize], dy: &[f32]) -> Vec<f32> {
    let (n, c) = (in_shape[0], in_shape[1]);
    let s: usize = in_shape[2..].iter().product();
    let co = out_shape[1];
    let mut dx = vec![0.0; n * c * s];
    for b in 0..n {
        dx[b * c * s..(b + 1) * c * s].copy_from_slice(&dy[b * co * s..][..c * s]);
    }
    dx
}

pub(super) fn global_avg_pool_backward(in_shape: &[usize], dy: &[f32]) -> Vec<f32> {
    let s: usize = in_shape[2..].iter().product();
    let scale = 1.0 / s as f32;
    dy.iter().flat_map(|&g| std::iter::repeat_n(g * scale, s)).collect()
}

impl Tape {
    /// 2×2 average pooling with stride 2 (trailing odd rows/columns dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("avg_pool2", self.value(x).shape())?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::InvalidShape(format!("avg_pool2 on {h}×{w} input")));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let at = |yy: usize, xx: usize| xd[(plane * h + yy) * w + xx];
                    out[(plane * ho + oy) * wo + ox] = 0.25
                        * (at(2 * oy, 2 * ox)
                            + at(2 * oy, 2 * ox + 1)
                            + at(2 * oy + 1, 2 * ox)
                            + at(2 * oy + 1, 2 * ox + 1));
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push(out, Op::AvgPool2(x), &[x])
    }

    /// Appends zero channels so that `x` has `channels` channels.
    pub fn pad_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 || channels < shape[1] {
            return Err(Error::InvalidShape(format!(
                "cannot pad {shape:?} to {channels} channels"
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * channels * s];
        for b in 0..n {
            out[b * channels * s..][..c * s].copy_from_slice(&xd[b * c * s..(b + 1) * c * s]);
        }
        let mut out_shape = shape;
        out_shape[1] = channels;
        let out = Tensor::new(out_shape, out)?;
        self.push(out, Op::PadChannels(x), &[x])
    }

    /// Mean over the spatial axes: `[N,C,H,W] → [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("global_avg_pool", self.value(x).shape())?;
        let s = h * w;
        let out: Vec<f32> = self
            .value(x)
            .data()
            .chunks(s)
            .map(|p| p.iter().sum::<f32>() / s as f32)
            .collect();
        let out = Tensor::new(vec![n, c], out)?;
        self.push(out, Op::GlobalAvgPool(x), &[x])
    }

    /// Same values viewed with a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::from_slice(v.shape(), v.data())?.reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }
}
