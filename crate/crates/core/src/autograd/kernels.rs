//! Raw numeric kernels shared by the forward and backward passes.

use crate::error::{Error, Result};

/// `c = a·b` (or `c += a·b` when `accumulate`), with `a` logically m×k and
/// `b` logically k×n. `a_t`/`b_t` mark operands stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
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

/// Row statistics kept from a masked softmax for the backward pass.
#[derive(Clone, Copy, Debug)]
pub(crate) struct RowScale {
    pub max: f64,
    pub sum: f64,
}

/// Row-wise softmax where each exponential is weighted by `mask`.
///
/// The row maximum is taken over entries with a nonzero mask weight, masked
/// entries produce exactly `0`, and `mask = None` behaves as an all-ones mask
/// through the same arithmetic.
pub(crate) fn masked_softmax_rows(
    logits: &[f64],
    mask: Option<&[f64]>,
    rows: usize,
    cols: usize,
    out: &mut [f64],
) -> Result<Vec<RowScale>> {
    let mut scales = Vec::with_capacity(rows);
    for r in 0..rows {
        let l = &logits[r * cols..(r + 1) * cols];
        let m = mask.map(|m| &m[r * cols..(r + 1) * cols]);
        let weight = |j: usize| m.map_or(1.0, |m| m[j]);
        let mut max = f64::NEG_INFINITY;
        for j in 0..cols {
            if weight(j) != 0.0 && l[j] > max {
                max = l[j];
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for j in 0..cols {
            let w = weight(j);
            let v = if w == 0.0 { 0.0 } else { w * (l[j] - max).exp() };
            o[j] = v;
            sum += v;
        }
        if !(sum > 0.0) {
            return Err(Error::DegenerateRow { row: r });
        }
        for v in o.iter_mut() {
            *v /= sum;
        }
        scales.push(RowScale { max, sum });
    }
    Ok(scales)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Geometry of a square-kernel 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds `x` (cin×h×w) into a (cin·k·k)×(oh·ow) column matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.out_len();
    let mut out = vec![0.0; g.patch_len() * cols];
    for ci in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oi in 0..g.oh {
                    let y = (oi * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + y as usize) * g.w..][..g.w];
                    for oj in 0..g.ow {
                        let xx = (oj * g.stride + kj) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.w as isize {
                            dst[oi * g.ow + oj] = src[xx as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto a cin×h×w buffer.
pub(crate) fn col2im(cols_buf: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let cols = g.out_len();
    for ci in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for oi in 0..g.oh {
                    let y = (oi * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + y as usize) * g.w;
                    for oj in 0..g.ow {
                        let xx = (oj * g.stride + kj) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.w as isize {
                            dx[base + xx as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}
