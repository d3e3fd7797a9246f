use super::kernels::{self, gemm};
use super::{accumulate, Node, Op, Var};

/// Pushes the gradient `g` of node `i` onto its inputs.
pub(super) fn propagate(
    nodes: &[Node],
    i: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    fault: Option<f64>,
) {
    let scaled;
    let g = match fault {
        Some(f) => {
            scaled = g.iter().map(|v| v * f).collect::<Vec<_>>();
            &scaled[..]
        }
        None => g,
    };
    let out = &nodes[i].value;
    let val = |v: Var| &nodes[v.0].value;

    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2().unwrap();
            let n = val(*b).shape()[1];
            // dA = G·Bᵀ, dB = Aᵀ·G
            accumulate(nodes, grads, *a, |ga| {
                gemm(m, n, k, g, false, val(*b).data(), true, ga, true)
            });
            accumulate(nodes, grads, *b, |gb| {
                gemm(k, m, n, val(*a).data(), true, g, false, gb, true)
            });
        }
        Op::Transpose(x) => {
            let (r, c) = val(*x).dims2().unwrap();
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| add_into(gb, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            accumulate(nodes, grads, *a, |ga| {
                ga.iter_mut().zip(g.iter().zip(vb)).for_each(|(d, (s, y))| *d += s * y)
            });
            accumulate(nodes, grads, *b, |gb| {
                gb.iter_mut().zip(g.iter().zip(va)).for_each(|(d, (s, x))| *d += s * x)
            });
        }
        Op::AddRow(x, v) => {
            let c = val(*v).len();
            accumulate(nodes, grads, *x, |gx| add_into(gx, g));
            accumulate(nodes, grads, *v, |gv| {
                for row in g.chunks(c) {
                    add_into(gv, row);
                }
            });
        }
        Op::MulRow(x, v) => {
            let c = val(*v).len();
            let (vx, vv) = (val(*x).data(), val(*v).data());
            accumulate(nodes, grads, *x, |gx| {
                for (idx, d) in gx.iter_mut().enumerate() {
                    *d += g[idx] * vv[idx % c];
                }
            });
            accumulate(nodes, grads, *v, |gv| {
                for (idx, s) in g.iter().enumerate() {
                    gv[idx % c] += s * vx[idx];
                }
            });
        }
        Op::AddCol(x, v) => {
            let n = val(*v).len();
            let c = g.len() / n;
            accumulate(nodes, grads, *x, |gx| add_into(gx, g));
            accumulate(nodes, grads, *v, |gv| {
                for (r, row) in g.chunks(c).enumerate() {
                    gv[r] += row.iter().sum::<f64>();
                }
            });
        }
        Op::MulCol(x, v) => {
            let n = val(*v).len();
            let c = g.len() / n;
            let (vx, vv) = (val(*x).data(), val(*v).data());
            accumulate(nodes, grads, *x, |gx| {
                for (idx, d) in gx.iter_mut().enumerate() {
                    *d += g[idx] * vv[idx / c];
                }
            });
            accumulate(nodes, grads, *v, |gv| {
                for (idx, s) in g.iter().enumerate() {
                    gv[idx / c] += s * vx[idx];
                }
            });
        }
        Op::Scale(x, s) => {
            accumulate(nodes, grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(d, v)| *d += v * s));
        }
        Op::AddScalar(x) | Op::Reshape(x) | Op::StraightThrough(x) => {
            accumulate(nodes, grads, *x, |gx| add_into(gx, g));
        }
        Op::SliceCols { x, start } => {
            let c = val(*x).shape()[1];
            let w = out.shape()[1];
            accumulate(nodes, grads, *x, |gx| {
                for (r, row) in g.chunks(w).enumerate() {
                    add_into(&mut gx[r * c + start..r * c + start + w], row);
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = out.shape()[1];
            let mut offset = 0;
            for p in parts {
                let w = val(*p).shape()[1];
                accumulate(nodes, grads, *p, |gp| {
                    for (r, row) in gp.chunks_mut(w).enumerate() {
                        add_into(row, &g[r * total + offset..r * total + offset + w]);
                    }
                });
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = val(*p).len();
                accumulate(nodes, grads, *p, |gp| add_into(gp, &g[offset..offset + len]));
                offset += len;
            }
        }
        Op::GatherRows { x, index } => {
            let c = val(*x).shape()[1];
            accumulate(nodes, grads, *x, |gx| {
                for (k, &src) in index.iter().enumerate() {
                    add_into(&mut gx[src * c..(src + 1) * c], &g[k * c..(k + 1) * c]);
                }
            });
        }
        Op::Standardize { x, inv_std } => {
            let c = out.shape()[1];
            let y = out.data();
            accumulate(nodes, grads, *x, |gx| {
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    let yr = &y[r * c..(r + 1) * c];
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[r * c + j] += is * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
            });
        }
        Op::MaskedSoftmax {
            logits,
            mask,
            scales,
        } => {
            let c = out.shape()[1];
            let y = out.data();
            let dots: Vec<f64> = (0..scales.len())
                .map(|r| {
                    g[r * c..(r + 1) * c]
                        .iter()
                        .zip(&y[r * c..(r + 1) * c])
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
            accumulate(nodes, grads, *logits, |gl| {
                for (r, dot) in dots.iter().enumerate() {
                    for j in r * c..(r + 1) * c {
                        gl[j] += y[j] * (g[j] - dot);
                    }
                }
            });
            if let Some(m) = mask {
                let l = val(*logits).data();
                accumulate(nodes, grads, *m, |gm| {
                    for (r, s) in scales.iter().enumerate() {
                        for j in r * c..(r + 1) * c {
                            let e = (l[j] - s.max).min(700.0).exp() / s.sum;
                            gm[j] += e * (g[j] - dots[r]);
                        }
                    }
                });
            }
        }
        Op::Gelu(x) => {
            let vx = val(*x).data();
            accumulate(nodes, grads, *x, |gx| {
                for (j, d) in gx.iter_mut().enumerate() {
                    *d += g[j] * kernels::gelu_grad(vx[j]);
                }
            });
        }
        Op::Relu(x) => {
            let vx = val(*x).data();
            accumulate(nodes, grads, *x, |gx| {
                for (j, d) in gx.iter_mut().enumerate() {
                    if vx[j] > 0.0 {
                        *d += g[j];
                    }
                }
            });
        }
        Op::Sigmoid(x) => {
            let y = out.data();
            accumulate(nodes, grads, *x, |gx| {
                for (j, d) in gx.iter_mut().enumerate() {
                    *d += g[j] * y[j] * (1.0 - y[j]);
                }
            });
        }
        Op::LnClamped { x, floor } => {
            let vx = val(*x).data();
            accumulate(nodes, grads, *x, |gx| {
                for (j, d) in gx.iter_mut().enumerate() {
                    if vx[j] > *floor {
                        *d += g[j] / vx[j];
                    }
                }
            });
        }
        Op::MaxRows { x, argmax } => {
            let c = argmax.len();
            accumulate(nodes, grads, *x, |gx| {
                for (j, &r) in argmax.iter().enumerate() {
                    gx[r * c + j] += g[j];
                }
            });
        }
        Op::MeanRows(x) => {
            let c = out.len();
            let n = val(*x).len() / c;
            accumulate(nodes, grads, *x, |gx| {
                for (idx, d) in gx.iter_mut().enumerate() {
                    *d += g[idx % c] / n as f64;
                }
            });
        }
        Op::Sum(x) => {
            accumulate(nodes, grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::Conv2d {
            x,
            kernel,
            geom,
            cols,
        } => {
            let (cout, pl, ol) = (geom.cout, geom.patch_len(), geom.out_len());
            // dK = G·colsᵀ
            accumulate(nodes, grads, *kernel, |gk| {
                gemm(cout, ol, pl, g, false, cols, true, gk, true)
            });
            if nodes[x.0].requires_grad {
                let mut dcols = vec![0.0; pl * ol];
                gemm(pl, cout, ol, val(*kernel).data(), true, g, false, &mut dcols, false);
                accumulate(nodes, grads, *x, |gx| kernels::col2im(&dcols, geom, gx));
            }
        }
        Op::LossWithGrad { x, grad, .. } => {
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut().zip(grad).for_each(|(d, v)| *d += g[0] * v)
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
