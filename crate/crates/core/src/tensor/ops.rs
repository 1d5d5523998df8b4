//! Forward ops and their backward rules.

use super::Tensor;

/// Suffix-broadcast layout of `rhs` against `lhs`: either shapes match, `rhs`
/// is a single element, or `rhs.shape` is a suffix of `lhs.shape`.
fn broadcast_reps(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> usize {
    if lhs.shape() == rhs.shape() {
        return 1;
    }
    if rhs.len() == 1 {
        return lhs.len();
    }
    let ls = lhs.shape();
    let rs = rhs.shape();
    let suffix_ok = rs.len() <= ls.len() && ls[ls.len() - rs.len()..] == *rs;
    if !suffix_ok {
        panic!("dimension error in `{op}`: lhs shape {ls:?} vs rhs shape {rs:?}");
    }
    lhs.len() / rhs.len()
}

fn binary(
    op: &'static str,
    lhs: &Tensor,
    rhs: &Tensor,
    fwd: impl Fn(f64, f64) -> f64,
    dlhs: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
    drhs: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
) -> Tensor {
    broadcast_reps(op, lhs, rhs);
    let n = rhs.len();
    let data: Vec<f64> = lhs
        .data()
        .iter()
        .enumerate()
        .map(|(i, &a)| fwd(a, rhs.data()[i % n]))
        .collect();
    let (l, r) = (lhs.clone(), rhs.clone());
    Tensor::from_op(op, lhs.shape().to_vec(), data, vec![lhs.clone(), rhs.clone()], move |g, grads| {
        let rn = r.len();
        let dl: Vec<f64> = g
            .iter()
            .enumerate()
            .map(|(i, &gi)| dlhs(gi, l.data()[i], r.data()[i % rn]))
            .collect();
        grads.accumulate(&l, &dl);
        let mut dr = vec![0.0; rn];
        for (i, &gi) in g.iter().enumerate() {
            dr[i % rn] += drhs(gi, l.data()[i], r.data()[i % rn]);
        }
        grads.accumulate(&r, &dr);
    })
}

fn unary(
    op: &'static str,
    x: &Tensor,
    fwd: impl Fn(f64) -> f64,
    // derivative given (input, output)
    dydx: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| fwd(v)).collect();
    let xc = x.clone();
    let out_data = data.clone();
    Tensor::from_op(op, x.shape().to_vec(), data, vec![x.clone()], move |g, grads| {
        let dx: Vec<f64> = g
            .iter()
            .zip(xc.data())
            .zip(&out_data)
            .map(|((&gi, &xi), &yi)| gi * dydx(xi, yi))
            .collect();
        grads.accumulate(&xc, &dx);
    })
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        binary("add", self, other, |a, b| a + b, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary("sub", self, other, |a, b| a - b, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary("mul", self, other, |a, b| a * b, |g, _, b| g * b, |g, a, _| g * a)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        binary(
            "div",
            self,
            other,
            |a, b| a / b,
            |g, _, b| g / b,
            |g, a, b| -g * a / (b * b),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary("add_scalar", self, |v| v + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        unary("mul_scalar", self, move |v| v * c, move |_, _| c)
    }

    pub fn tanh(&self) -> Tensor {
        unary("tanh", self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn square(&self) -> Tensor {
        unary("square", self, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary("sqrt", self, f64::sqrt, |_, y| 0.5 / y.max(1e-12))
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        if self.shape().len() != 2 || other.shape().len() != 2 || self.cols() != other.rows() {
            panic!(
                "dimension error in `matmul`: lhs shape {:?} vs rhs shape {:?}",
                self.shape(),
                other.shape()
            );
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let data = matmul_raw(self.data(), other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            move |g, grads| {
                // dA = G·Bᵀ
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for p in 0..k {
                            da[i * k + p] += gij * b.data()[p * n + j];
                        }
                    }
                }
                grads.accumulate(&a, &da);
                // dB = Aᵀ·G
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = a.data()[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                grads.accumulate(&b, &db);
            },
        )
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "transpose requires a 2-D tensor");
        let (m, n) = (self.rows(), self.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data()[i * n + j];
            }
        }
        let x = self.clone();
        Tensor::from_op("transpose", vec![n, m], data, vec![self.clone()], move |g, grads| {
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    dx[i * n + j] = g[j * m + i];
                }
            }
            grads.accumulate(&x, &dx);
        })
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let x = self.clone();
        Tensor::from_op("sum", vec![1], vec![s], vec![self.clone()], move |g, grads| {
            grads.accumulate(&x, &vec![g[0]; x.len()]);
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        let s: f64 = self.data().iter().sum::<f64>() / n;
        let x = self.clone();
        Tensor::from_op("mean", vec![1], vec![s], vec![self.clone()], move |g, grads| {
            grads.accumulate(&x, &vec![g[0] / n; x.len()]);
        })
    }

    /// Sum over the last axis: `[.., D] -> [..]` (scalar for 1-D input).
    pub fn sum_last(&self) -> Tensor {
        let d = *self.shape().last().expect("sum_last on empty shape");
        let outer = self.len() / d;
        let mut data = vec![0.0; outer];
        for (o, slot) in data.iter_mut().enumerate() {
            *slot = self.data()[o * d..(o + 1) * d].iter().sum();
        }
        let out_shape = if self.shape().len() == 1 {
            vec![1]
        } else {
            self.shape()[..self.shape().len() - 1].to_vec()
        };
        let x = self.clone();
        Tensor::from_op("sum_last", out_shape, data, vec![self.clone()], move |g, grads| {
            let mut dx = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..d {
                    dx[o * d + i] = g[o];
                }
            }
            grads.accumulate(&x, &dx);
        })
    }

    /// Mean over rows of a 2-D tensor: `[L, D] -> [D]`.
    pub fn mean_rows(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "mean_rows requires a 2-D tensor");
        let (l, d) = (self.rows(), self.cols());
        let mut data = vec![0.0; d];
        for r in 0..l {
            for c in 0..d {
                data[c] += self.data()[r * d + c];
            }
        }
        for v in data.iter_mut() {
            *v /= l as f64;
        }
        let x = self.clone();
        Tensor::from_op("mean_rows", vec![d], data, vec![self.clone()], move |g, grads| {
            let mut dx = vec![0.0; l * d];
            for r in 0..l {
                for c in 0..d {
                    dx[r * d + c] = g[c] / l as f64;
                }
            }
            grads.accumulate(&x, &dx);
        })
    }

    /// L2 norm along the last axis: `[.., D] -> [..]`.
    pub fn norm_last(&self) -> Tensor {
        let d = *self.shape().last().expect("norm_last on empty shape");
        let outer = self.len() / d;
        let mut data = vec![0.0; outer];
        for (o, slot) in data.iter_mut().enumerate() {
            let s: f64 = self.data()[o * d..(o + 1) * d].iter().map(|v| v * v).sum();
            *slot = s.sqrt();
        }
        let out_shape = if self.shape().len() == 1 {
            vec![1]
        } else {
            self.shape()[..self.shape().len() - 1].to_vec()
        };
        let x = self.clone();
        let norms = data.clone();
        Tensor::from_op("norm_last", out_shape, data, vec![self.clone()], move |g, grads| {
            let mut dx = vec![0.0; x.len()];
            for o in 0..outer {
                let n = norms[o].max(1e-12);
                for i in 0..d {
                    dx[o * d + i] = g[o] * x.data()[o * d + i] / n;
                }
            }
            grads.accumulate(&x, &dx);
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor {
        assert!(
            axis < self.shape().len(),
            "softmax axis {axis} out of range for shape {:?}",
            self.shape()
        );
        let n = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let outer: usize = self.shape()[..axis].iter().product();
        let mut data = vec![0.0; self.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..n {
                    mx = mx.max(self.data()[idx(k)]);
                }
                let mut z = 0.0;
                for k in 0..n {
                    let e = (self.data()[idx(k)] - mx).exp();
                    data[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    data[idx(k)] /= z;
                }
            }
        }
        let x = self.clone();
        let y = data.clone();
        Tensor::from_op("softmax", self.shape().to_vec(), data, vec![self.clone()], move |g, grads| {
            let mut dx = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * n + k) * inner + i;
                    let mut dot = 0.0;
                    for k in 0..n {
                        dot += g[idx(k)] * y[idx(k)];
                    }
                    for k in 0..n {
                        dx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                    }
                }
            }
            grads.accumulate(&x, &dx);
        })
    }

    /// Token-wise layer normalization along the last axis, population
    /// variance, no learnable affine.
    pub fn layer_norm(&self, eps: f64) -> Tensor {
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let d = *self.shape().last().expect("layer_norm on empty shape");
        if d < 2 {
            panic!("degenerate token: layer_norm requires last axis >= 2, shape {:?}", self.shape());
        }
        let outer = self.len() / d;
        let mut data = vec![0.0; self.len()];
        let mut inv_std = vec![0.0; outer];
        for o in 0..outer {
            let row = &self.data()[o * d..(o + 1) * d];
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[o] = s;
            for i in 0..d {
                data[o * d + i] = (row[i] - mean) * s;
            }
        }
        let x = self.clone();
        let y = data.clone();
        Tensor::from_op("layer_norm", self.shape().to_vec(), data, vec![self.clone()], move |g, grads| {
            let mut dx = vec![0.0; x.len()];
            for o in 0..outer {
                let gr = &g[o * d..(o + 1) * d];
                let yr = &y[o * d..(o + 1) * d];
                let g_mean: f64 = gr.iter().sum::<f64>() / d as f64;
                let gy_mean: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for i in 0..d {
                    dx[o * d + i] = inv_std[o] * (gr[i] - g_mean - yr[i] * gy_mean);
                }
            }
            grads.accumulate(&x, &dx);
        })
    }

    /// Row-wise concatenation of 2-D tensors with matching column counts.
    pub fn concat_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let d = parts[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols(), d, "concat_rows column mismatch: {:?}", p.shape());
            rows += p.rows();
            data.extend_from_slice(p.data());
        }
        let owned: Vec<Tensor> = parts.to_vec();
        Tensor::from_op("concat_rows", vec![rows, d], data, owned.clone(), move |g, grads| {
            let mut off = 0;
            for p in &owned {
                grads.accumulate(p, &g[off..off + p.len()]);
                off += p.len();
            }
        })
    }

    /// Column-wise concatenation of 2-D tensors with matching row counts.
    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = parts[0].rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(p.rows(), rows, "concat_cols row mismatch: {:?}", p.shape());
                p.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let owned: Vec<Tensor> = parts.to_vec();
        Tensor::from_op("concat_cols", vec![rows, total], data, owned.clone(), move |g, grads| {
            let mut off = 0;
            for (p, &w) in owned.iter().zip(&widths) {
                let mut dp = vec![0.0; rows * w];
                for r in 0..rows {
                    dp[r * w..(r + 1) * w].copy_from_slice(&g[r * total + off..r * total + off + w]);
                }
                grads.accumulate(p, &dp);
                off += w;
            }
        })
    }

    /// Rows `[lo, hi)` of a 2-D tensor.
    pub fn slice_rows(&self, lo: usize, hi: usize) -> Tensor {
        assert_eq!(self.shape().len(), 2, "slice_rows requires a 2-D tensor");
        let (m, d) = (self.rows(), self.cols());
        assert!(lo < hi && hi <= m, "slice_rows range {lo}..{hi} out of {m} rows");
        let data = self.data()[lo * d..hi * d].to_vec();
        let x = self.clone();
        Tensor::from_op("slice_rows", vec![hi - lo, d], data, vec![self.clone()], move |g, grads| {
            let mut dx = vec![0.0; x.len()];
            dx[lo * d..hi * d].copy_from_slice(g);
            grads.accumulate(&x, &dx);
        })
    }

    /// Columns `[lo, hi)` of a 2-D tensor.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Tensor {
        assert_eq!(self.shape().len(), 2, "slice_cols requires a 2-D tensor");
        let (m, d) = (self.rows(), self.cols());
        assert!(lo < hi && hi <= d, "slice_cols range {lo}..{hi} out of {d} cols");
        let w = hi - lo;
        let mut data = vec![0.0; m * w];
        for r in 0..m {
            data[r * w..(r + 1) * w].copy_from_slice(&self.data()[r * d + lo..r * d + hi]);
        }
        let x = self.clone();
        Tensor::from_op("slice_cols", vec![m, w], data, vec![self.clone()], move |g, grads| {
            let mut dx = vec![0.0; x.len()];
            for r in 0..m {
                dx[r * d + lo..r * d + hi].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            grads.accumulate(&x, &dx);
        })
    }

    /// `out[i] = self[index[i]]`; backward scatters with accumulation.
    /// Exact linear rearrangement, used by the patch codec.
    pub fn gather(&self, index: &[usize], out_shape: &[usize]) -> Tensor {
        assert_eq!(
            out_shape.iter().product::<usize>(),
            index.len(),
            "gather output shape {:?} does not match {} indices",
            out_shape,
            index.len()
        );
        for &i in index {
            assert!(i < self.len(), "gather index {i} out of bounds {}", self.len());
        }
        let data: Vec<f64> = index.iter().map(|&i| self.data()[i]).collect();
        let x = self.clone();
        let index = index.to_vec();
        Tensor::from_op("gather", out_shape.to_vec(), data, vec![self.clone()], move |g, grads| {
            let mut dx = vec![0.0; x.len()];
            for (o, &i) in index.iter().enumerate() {
                dx[i] += g[o];
            }
            grads.accumulate(&x, &dx);
        })
    }

    /// Same data, new shape. Zero-cost in the graph.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.len(),
            "reshape {:?} incompatible with {} elements",
            shape,
            self.len()
        );
        let x = self.clone();
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            move |g, grads| grads.accumulate(&x, g),
        )
    }

    /// Repeats a 1-D tensor as `rows` identical rows of a 2-D tensor.
    pub fn broadcast_rows(&self, rows: usize) -> Tensor {
        assert_eq!(self.shape().len(), 1, "broadcast_rows requires a 1-D tensor");
        let d = self.len();
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            data.extend_from_slice(self.data());
        }
        let x = self.clone();
        Tensor::from_op("broadcast_rows", vec![rows, d], data, vec![self.clone()], move |g, grads| {
            let mut dx = vec![0.0; d];
            for r in 0..rows {
                for c in 0..d {
                    dx[c] += g[r * d + c];
                }
            }
            grads.accumulate(&x, &dx);
        })
    }

    /// Cosine similarity along the last axis with an eps-guarded denominator:
    /// `dot / (‖a‖·‖b‖ + eps)`. Zero-norm tokens on either side yield 0.
    pub fn cosine_last(&self, other: &Tensor, eps: f64) -> Tensor {
        assert_eq!(
            self.shape(),
            other.shape(),
            "dimension error in `cosine_last`: {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let dot = self.mul(other).sum_last();
        let denom = self.norm_last().mul(&other.norm_last()).add_scalar(eps);
        dot.div(&denom)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}
