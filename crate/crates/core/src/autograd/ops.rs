use super::kernels::{self, ConvGeom};
use super::{Op, OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stride and padding of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    /// Stride 1 with "same" padding for an odd kernel size.
    pub fn same(k: usize) -> Self {
        Self {
            stride: 1,
            pad: k / 2,
        }
    }
}

impl Tape {
    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2().map_err(|_| {
            Error::shape(op, format!("expected a matrix, got {:?}", self.shape(v)))
        })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new([m, n], out)?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new([c, r], out)?;
        self.push(value, Op::Transpose(x), &[x])
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Broadcasts a length-`c` vector over every row of an n×c matrix.
    fn row_broadcast(
        &mut self,
        x: Var,
        v: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (n, c) = self.dims2(name, x)?;
        if self.value(v).len() != c {
            return Err(Error::mismatch(name, self.shape(x), self.shape(v)));
        }
        let xv = self.value(x).data();
        let vv = self.value(v).data();
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            out.extend(xv[i * c..(i + 1) * c].iter().zip(vv).map(|(&a, &b)| f(a, b)));
        }
        let value = Tensor::new([n, c], out)?;
        self.push(value, op, &[x, v])
    }

    /// Broadcasts a length-`n` vector over every column of an n×c matrix.
    fn col_broadcast(
        &mut self,
        x: Var,
        v: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (n, c) = self.dims2(name, x)?;
        if self.value(v).len() != n {
            return Err(Error::mismatch(name, self.shape(x), self.shape(v)));
        }
        let xv = self.value(x).data();
        let vv = self.value(v).data();
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            out.extend(xv[i * c..(i + 1) * c].iter().map(|&a| f(a, vv[i])));
        }
        let value = Tensor::new([n, c], out)?;
        self.push(value, op, &[x, v])
    }

    /// `x[i, j] + v[j]`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast(x, v, "add_row", |a, b| a + b, Op::AddRow(x, v))
    }

    /// `x[i, j] * v[j]`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast(x, v, "mul_row", |a, b| a * b, Op::MulRow(x, v))
    }

    /// `x[i, j] + v[i]`.
    pub fn add_col(&mut self, x: Var, v: Var) -> Result<Var> {
        self.col_broadcast(x, v, "add_col", |a, b| a + b, Op::AddCol(x, v))
    }

    /// `x[i, j] * v[i]`.
    pub fn mul_col(&mut self, x: Var, v: Var) -> Result<Var> {
        self.col_broadcast(x, v, "mul_col", |a, b| a * b, Op::MulCol(x, v))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let value = self.value(x).reshape(shape.clone()).map_err(|_| {
            Error::mismatch("reshape", self.shape(x), &shape)
        })?;
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c) = self.dims2("slice_cols", x)?;
        if start >= end || end > c {
            return Err(Error::shape(
                "slice_cols",
                format!("range {start}..{end} invalid for {c} columns"),
            ));
        }
        let src = self.value(x).data();
        let w = end - start;
        let mut out = Vec::with_capacity(n * w);
        for i in 0..n {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let value = Tensor::new([n, w], out)?;
        self.push(value, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty { op: "concat_cols" })?;
        let (n, _) = self.dims2("concat_cols", first)?;
        let mut total = 0;
        for &p in parts {
            let (pn, pc) = self.dims2("concat_cols", p)?;
            if pn != n {
                return Err(Error::mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new([n, total], out)?;
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty { op: "concat_rows" })?;
        let (_, c) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (pn, pc) = self.dims2("concat_rows", p)?;
            if pc != c {
                return Err(Error::mismatch("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pn;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new([rows, c], out)?;
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows of `x` selected (with repetition allowed) by `index`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2("gather_rows", x)?;
        if index.is_empty() {
            return Err(Error::Empty { op: "gather_rows" });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {n} rows"),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::new([index.len(), c], out)?;
        self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` with the biased variance.
    pub fn standardize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {eps}")));
        }
        let (n, c) = self.dims2("standardize_rows", x)?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            out.extend(row.iter().map(|v| (v - mean) * is));
            inv_std.push(is);
        }
        let value = Tensor::new([n, c], out)?;
        self.push(value, Op::Standardize { x, inv_std }, &[x])
    }

    /// Row-wise softmax with exponentials weighted by `mask`.
    ///
    /// Entries where the mask is 0 come out exactly 0 and each row sums to 1.
    /// The mask may itself be a differentiable node.
    pub fn masked_softmax(&mut self, logits: Var, mask: Var) -> Result<Var> {
        self.same_shape("masked_softmax", logits, mask)?;
        self.softmax_impl(logits, Some(mask))
    }

    /// Row-wise softmax; the all-ones-mask special case of [`Tape::masked_softmax`].
    pub fn softmax_rows(&mut self, logits: Var) -> Result<Var> {
        self.softmax_impl(logits, None)
    }

    fn softmax_impl(&mut self, logits: Var, mask: Option<Var>) -> Result<Var> {
        let (r, c) = self.dims2("masked_softmax", logits)?;
        let mut out = vec![0.0; r * c];
        let scales = kernels::masked_softmax_rows(
            self.value(logits).data(),
            mask.map(|m| self.value(m).data()),
            r,
            c,
            &mut out,
        )?;
        let value = Tensor::new([r, c], out)?;
        let inputs: Vec<Var> = std::iter::once(logits).chain(mask).collect();
        self.push(
            value,
            Op::MaskedSoftmax {
                logits,
                mask,
                scales,
            },
            &inputs,
        )
    }

    /// Exact (erf-based) Gaussian error linear unit.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// `ln(max(x, floor))`; the gradient is 0 where the floor is active.
    pub fn ln_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary(x, |v| v.max(floor).ln(), Op::LnClamped { x, floor })
    }

    /// Column-wise maximum of an n×c matrix, as a 1×c row.
    ///
    /// Ties go to the lowest row index, which is also where the gradient is routed.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.dims2("max_rows", x)?;
        let src = self.value(x).data();
        let mut argmax = vec![0usize; c];
        let mut out = src[..c].to_vec();
        for i in 1..n {
            for j in 0..c {
                if src[i * c + j] > out[j] {
                    out[j] = src[i * c + j];
                    argmax[j] = i;
                }
            }
        }
        let value = Tensor::new([1, c], out)?;
        self.push(value, Op::MaxRows { x, argmax }, &[x])
    }

    /// Column-wise mean of an n×c matrix, as a 1×c row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.dims2("mean_rows", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; c];
        for i in 0..n {
            for j in 0..c {
                out[j] += src[i * c + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let value = Tensor::new([1, c], out)?;
        self.push(value, Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// 2-D cross-correlation of a cin×h×w input with cout×cin×k×k kernels.
    pub fn conv2d(&mut self, x: Var, kernel: Var, spec: ConvSpec) -> Result<Var> {
        let (cin, h, w) = self.value(x).dims3()?;
        let kshape = self.shape(kernel).to_vec();
        let [cout, kcin, k, k2] = kshape[..] else {
            return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {kshape:?}")));
        };
        if kcin != cin || k != k2 {
            return Err(Error::mismatch("conv2d", self.shape(x), &kshape));
        }
        if k % 2 == 0 || spec.stride == 0 {
            return Err(Error::shape("conv2d", "kernel size must be odd and stride positive"));
        }
        let span_h = (h + 2 * spec.pad) as isize - k as isize;
        let span_w = (w + 2 * spec.pad) as isize - k as isize;
        if span_h < 0 || span_w < 0 {
            return Err(Error::shape(
                "conv2d",
                format!("output size is not positive for input {h}x{w}, kernel {k}, pad {}", spec.pad),
            ));
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            cout,
            k,
            stride: spec.stride,
            pad: spec.pad,
            oh: span_h as usize / spec.stride + 1,
            ow: span_w as usize / spec.stride + 1,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out = vec![0.0; cout * geom.out_len()];
        kernels::gemm(
            cout,
            geom.patch_len(),
            geom.out_len(),
            self.value(kernel).data(),
            false,
            &cols,
            false,
            &mut out,
            false,
        );
        let value = Tensor::new([cout, geom.oh, geom.ow], out)?;
        self.push(
            value,
            Op::Conv2d {
                x,
                kernel,
                geom,
                cols,
            },
            &[x, kernel],
        )
    }

    /// Straight-through estimator: the forward value is `hard` (plus
    /// `soft - soft_ref` when a reference is given), the backward pass routes
    /// the gradient to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: &Tensor, soft_ref: Option<&Tensor>) -> Result<Var> {
        if self.shape(soft) != hard.shape() {
            return Err(Error::mismatch("straight_through", self.shape(soft), hard.shape()));
        }
        let value = match soft_ref {
            None => hard.clone(),
            Some(r) => {
                if r.shape() != hard.shape() {
                    return Err(Error::mismatch("straight_through", r.shape(), hard.shape()));
                }
                let s = self.value(soft).data();
                let data = hard
                    .data()
                    .iter()
                    .zip(s.iter().zip(r.data()))
                    .map(|(&h, (&s, &r))| h + (s - r))
                    .collect();
                Tensor::new(hard.shape(), data)?
            }
        };
        self.push(value, Op::StraightThrough(soft), &[soft])
    }

    /// Records a scalar loss whose gradient w.r.t. `x` was computed alongside the value.
    pub(crate) fn loss_with_grad(&mut self, kind: OpKind, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        debug_assert_eq!(grad.len(), self.value(x).len());
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: kind.name() });
        }
        self.push(Tensor::scalar(value), Op::LossWithGrad { kind, x, grad }, &[x])
    }
}
