//! Convolution (im2col + GEMM) and fully connected layers.

use super::{ConvGeometry, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `c = a · b` (or `c += a · b` when `accumulate`), where `a` is
/// `m×k` and `b` is `k×n` after the optional transposes of their storage.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a convolution along one axis, or `None` if the kernel
/// does not fit the padded input.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfolds `x` into a `[C·kh·kw, N·Ho·Wo]` column matrix.
fn im2col(x: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let p = g.ho * g.wo;
    let cols = g.n * p;
    let mut col = vec![0.0; g.c * g.kh * g.kw * cols];
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..][..g.w];
                        let base = n * p + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a column matrix back into image layout.
fn col2im(col: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let p = g.ho * g.wo;
    let cols = g.n * p;
    let mut dx = vec![0.0; g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let plane = &mut dx[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = n * p + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                plane[iy as usize * g.w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(super) fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    g: &ConvGeometry,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let p = g.ho * g.wo;
    let cols = g.n * p;
    let ck = g.c * g.kh * g.kw;
    // dY as [F, N·P]
    let mut dyt = vec![0.0; g.f * cols];
    for n in 0..g.n {
        for f in 0..g.f {
            dyt[f * cols + n * p..][..p].copy_from_slice(&dy[(n * g.f + f) * p..][..p]);
        }
    }
    let dw = want_dw.then(|| {
        let col = im2col(x, g);
        let mut dw = vec![0.0; g.f * ck];
        gemm(g.f, cols, ck, &dyt, false, &col, true, &mut dw, false);
        dw
    });
    let dx = want_dx.then(|| {
        let mut dcol = vec![0.0; ck * cols];
        gemm(ck, g.f, cols, w, true, &dyt, false, &mut dcol, false);
        col2im(&dcol, g)
    });
    (dx, dw)
}

pub(super) fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &[f32],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[0];
    let dx = want_dx.then(|| {
        let mut dx = vec![0.0; n * d];
        gemm(n, k, d, dy, false, w.data(), false, &mut dx, false);
        dx
    });
    let dw = want_dw.then(|| {
        let mut dw = vec![0.0; k * d];
        gemm(k, n, d, dy, true, x.data(), false, &mut dw, false);
        dw
    });
    let db = want_db.then(|| {
        let mut db = vec![0.0; k];
        for row in dy.chunks(k) {
            db.iter_mut().zip(row).for_each(|(b, g)| *b += g);
        }
        db
    });
    (dx, dw, db)
}

impl Tape {
    /// 2-D cross-correlation of `x: [N,C,H,W]` with `kernel: [F,C,kH,kW]`,
    /// zero padding on every side.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.value(x).shape(), self.value(kernel).shape());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        let (ho, wo) = match (
            conv2d_output_size(xs[2], ks[2], stride, pad),
            conv2d_output_size(xs[3], ks[3], stride, pad),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::InvalidShape(format!(
                    "conv2d kernel {ks:?} with stride {stride}, padding {pad} does not fit input {xs:?}"
                )))
            }
        };
        let g = ConvGeometry {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            f: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
            ho,
            wo,
        };
        let p = ho * wo;
        let cols = g.n * p;
        let col = im2col(self.value(x).data(), &g);
        let mut tmp = vec![0.0; g.f * cols];
        gemm(
            g.f,
            g.c * g.kh * g.kw,
            cols,
            self.value(kernel).data(),
            false,
            &col,
            false,
            &mut tmp,
            false,
        );
        let mut out = vec![0.0; g.n * g.f * p];
        for n in 0..g.n {
            for f in 0..g.f {
                out[(n * g.f + f) * p..][..p].copy_from_slice(&tmp[f * cols + n * p..][..p]);
            }
        }
        let out = Tensor::new(vec![g.n, g.f, ho, wo], out)?;
        self.push(out, Op::Conv2d { x, w: kernel, geom: g }, &[x, kernel])
    }

    /// `x · wᵀ + b` for `x: [N,D]`, `w: [K,D]`, `b: [K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (n, d, k) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.value(b).numel() != k {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: ws.to_vec(),
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let mut out = vec![0.0; n * k];
        gemm(n, d, k, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(k) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        let out = Tensor::new(vec![n, k], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }
}
