//! Differentiable primitives.
//!
//! Backward rules are closures over clones of whatever forward state they
//! need; they never touch the graph, so the backward driver stays a plain
//! loop. Matrix products go through `matrixmultiply::dgemm`, everything else
//! is written out directly.

use super::Value;
use crate::error::{Error, Result};

/// Tanh-approximation GELU constant (0.044715, paired with sqrt(2/pi)).
const GELU_CUBIC: f64 = 0.044715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

/// Additive mask bias for padded attention columns. exp(-1e30) underflows to
/// exactly 0, so padded keys carry zero attention weight.
pub const MASK_NEG: f64 = -1.0e30;

// c[m,n] = a[m,k] · b[k,n], all row-major.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// c[m,n] = a[m,k] · b^T where b is stored row-major [n,k].
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// c[m,n] = a^T · b where a is stored row-major [k,m].
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

/// Last-dimension row length and row count for 1-D/2-D tensors.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

fn stable_softmax_row(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - mx).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// log(sum(exp(row))) with max subtraction.
fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln()
}

impl Value {
    pub fn add(&self, other: &Value) -> Result<Value> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(shape_err("add", &sa, &sb));
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Value::from_op(
            sa,
            data,
            vec![self.clone(), other.clone()],
            |g| vec![g.to_vec(), g.to_vec()],
        ))
    }

    pub fn sub(&self, other: &Value) -> Result<Value> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(shape_err("sub", &sa, &sb));
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Value::from_op(
            sa,
            data,
            vec![self.clone(), other.clone()],
            |g| vec![g.to_vec(), g.iter().map(|x| -x).collect()],
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Value) -> Result<Value> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(shape_err("mul", &sa, &sb));
        }
        let a = self.to_vec();
        let b = other.to_vec();
        let data: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        Ok(Value::from_op(
            sa,
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                vec![
                    g.iter().zip(&b).map(|(gi, bi)| gi * bi).collect(),
                    g.iter().zip(&a).map(|(gi, ai)| gi * ai).collect(),
                ]
            },
        ))
    }

    pub fn neg(&self) -> Value {
        let data: Vec<f64> = self.data().iter().map(|x| -x).collect();
        Value::from_op(self.shape(), data, vec![self.clone()], |g| {
            vec![g.iter().map(|x| -x).collect()]
        })
    }

    pub fn scale(&self, c: f64) -> Value {
        let data: Vec<f64> = self.data().iter().map(|x| x * c).collect();
        Value::from_op(self.shape(), data, vec![self.clone()], move |g| {
            vec![g.iter().map(|x| x * c).collect()]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Value {
        let data: Vec<f64> = self.data().iter().map(|x| x + c).collect();
        Value::from_op(self.shape(), data, vec![self.clone()], |g| vec![g.to_vec()])
    }

    /// Elementwise reciprocal.
    pub fn recip(&self) -> Value {
        let a = self.to_vec();
        let data: Vec<f64> = a.iter().map(|x| 1.0 / x).collect();
        Value::from_op(self.shape(), data, vec![self.clone()], move |g| {
            vec![g.iter().zip(&a).map(|(gi, ai)| -gi / (ai * ai)).collect()]
        })
    }

    /// Broadcast row add: `[m,n] + [n]`.
    pub fn add_bias(&self, bias: &Value) -> Result<Value> {
        let sa = self.shape();
        let sb = bias.shape();
        let (rows, cols) = rows_cols(&sa);
        if sb.len() != 1 || sb[0] != cols {
            return Err(shape_err("add_bias", &sa, &sb));
        }
        let mut data = self.to_vec();
        {
            let b = bias.data();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] += b[c];
                }
            }
        }
        Ok(Value::from_op(
            sa,
            data,
            vec![self.clone(), bias.clone()],
            move |g| {
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        db[c] += g[r * cols + c];
                    }
                }
                vec![g.to_vec(), db]
            },
        ))
    }

    /// Matrix product `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Value) -> Result<Value> {
        let sa = self.shape();
        let sb = other.shape();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let a = self.to_vec();
        let b = other.to_vec();
        let mut data = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut data);
        let need_a = self.requires_grad();
        let need_b = other.requires_grad();
        Ok(Value::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                let da = if need_a {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(m, n, k, g, &b, &mut da);
                    da
                } else {
                    Vec::new()
                };
                let db = if need_b {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(k, m, n, &a, g, &mut db);
                    db
                } else {
                    Vec::new()
                };
                vec![da, db]
            },
        ))
    }

    pub fn transpose(&self) -> Result<Value> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::InvalidArgument {
                op: "transpose",
                msg: format!("expected 2-D, got {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let a = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = a[i * n + j];
            }
        }
        drop(a);
        Ok(Value::from_op(
            vec![n, m],
            data,
            vec![self.clone()],
            move |g| {
                let mut dg = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dg[i * n + j] = g[j * m + i];
                    }
                }
                vec![dg]
            },
        ))
    }

    /// Select row `i` of a 2-D tensor as a 1-D vector.
    pub fn row(&self, i: usize) -> Result<Value> {
        let s = self.shape();
        if s.len() != 2 || i >= s[0] {
            return Err(Error::InvalidArgument {
                op: "row",
                msg: format!("row {i} of shape {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let data = self.data()[i * n..(i + 1) * n].to_vec();
        Ok(Value::from_op(
            vec![n],
            data,
            vec![self.clone()],
            move |g| {
                let mut dg = vec![0.0; m * n];
                dg[i * n..(i + 1) * n].copy_from_slice(g);
                vec![dg]
            },
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Value> {
        let s = self.shape();
        if s.len() != 2 || start + len > s[0] {
            return Err(Error::InvalidArgument {
                op: "slice_rows",
                msg: format!("rows {start}..{} of shape {s:?}", start + len),
            });
        }
        let (m, n) = (s[0], s[1]);
        let data = self.data()[start * n..(start + len) * n].to_vec();
        Ok(Value::from_op(
            vec![len, n],
            data,
            vec![self.clone()],
            move |g| {
                let mut dg = vec![0.0; m * n];
                dg[start * n..(start + len) * n].copy_from_slice(g);
                vec![dg]
            },
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Value> {
        let s = self.shape();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::InvalidArgument {
                op: "slice_cols",
                msg: format!("cols {start}..{} of shape {s:?}", start + len),
            });
        }
        let (m, n) = (s[0], s[1]);
        let a = self.data();
        let mut data = vec![0.0; m * len];
        for r in 0..m {
            data[r * len..(r + 1) * len].copy_from_slice(&a[r * n + start..r * n + start + len]);
        }
        drop(a);
        Ok(Value::from_op(
            vec![m, len],
            data,
            vec![self.clone()],
            move |g| {
                let mut dg = vec![0.0; m * n];
                for r in 0..m {
                    dg[r * n + start..r * n + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![dg]
            },
        ))
    }

    pub fn sum(&self) -> Value {
        let total: f64 = self.data().iter().sum();
        let n = self.numel();
        Value::from_op(vec![], vec![total], vec![self.clone()], move |g| {
            vec![vec![g[0]; n]]
        })
    }

    pub fn mean(&self) -> Value {
        let n = self.numel();
        let total: f64 = self.data().iter().sum();
        Value::from_op(vec![], vec![total / n as f64], vec![self.clone()], move |g| {
            vec![vec![g[0] / n as f64; n]]
        })
    }

    pub fn sigmoid(&self) -> Value {
        let y: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let y2 = y.clone();
        Value::from_op(self.shape(), y, vec![self.clone()], move |g| {
            vec![g
                .iter()
                .zip(&y2)
                .map(|(gi, si)| gi * si * (1.0 - si))
                .collect()]
        })
    }

    /// GELU, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Value {
        let c = sqrt_2_over_pi();
        let x = self.to_vec();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (c * (v + GELU_CUBIC * v * v * v)).tanh()))
            .collect();
        Value::from_op(self.shape(), y, vec![self.clone()], move |g| {
            let dg = g
                .iter()
                .zip(&x)
                .map(|(gi, &v)| {
                    let u = c * (v + GELU_CUBIC * v * v * v);
                    let t = u.tanh();
                    let du = c * (1.0 + 3.0 * GELU_CUBIC * v * v);
                    gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                })
                .collect();
            vec![dg]
        })
    }

    /// Softmax along `axis`. Rows along the last axis are normalized with
    /// max subtraction; outputs are nonnegative and sum to 1 per row.
    pub fn softmax(&self, axis: usize) -> Result<Value> {
        let s = self.shape();
        if axis >= s.len().max(1) {
            return Err(Error::InvalidArgument {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {s:?}"),
            });
        }
        if s.len() == 2 && axis == 0 {
            // Normalize columns by round-tripping through transpose.
            return self.transpose()?.softmax(1)?.transpose();
        }
        let (rows, cols) = rows_cols(&s);
        let a = self.to_vec();
        let mut y = vec![0.0; a.len()];
        for r in 0..rows {
            stable_softmax_row(&a[r * cols..(r + 1) * cols], &mut y[r * cols..(r + 1) * cols]);
        }
        let y2 = y.clone();
        Ok(Value::from_op(s, y, vec![self.clone()], move |g| {
            let mut dx = vec![0.0; g.len()];
            for r in 0..rows {
                let yr = &y2[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for c in 0..cols {
                    dx[r * cols + c] = yr[c] * (gr[c] - dot);
                }
            }
            vec![dx]
        }))
    }

    /// Layer normalization over the last dimension followed by the affine
    /// transform `gamma * xhat + beta`.
    pub fn layer_norm(&self, gamma: &Value, beta: &Value, eps: f64) -> Result<Value> {
        let s = self.shape();
        let (rows, cols) = rows_cols(&s);
        let sg = gamma.shape();
        let sb = beta.shape();
        if sg != vec![cols] {
            return Err(shape_err("layer_norm", &s, &sg));
        }
        if sb != vec![cols] {
            return Err(shape_err("layer_norm", &s, &sb));
        }
        let x = self.to_vec();
        let gam = gamma.to_vec();
        let bet = beta.to_vec();
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let mu = xr.iter().sum::<f64>() / cols as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (xr[c] - mu) * is;
                xhat[r * cols + c] = h;
                y[r * cols + c] = gam[c] * h + bet[c];
            }
        }
        Ok(Value::from_op(
            s,
            y,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                let mut dx = vec![0.0; g.len()];
                let mut dgam = vec![0.0; cols];
                let mut dbet = vec![0.0; cols];
                for r in 0..rows {
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    // dl/dxhat = g * gamma; dx from the usual LN identity.
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..cols {
                        let dh = gr[c] * gam[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[c];
                        dgam[c] += gr[c] * hr[c];
                        dbet[c] += gr[c];
                    }
                    mean_dh /= cols as f64;
                    mean_dh_h /= cols as f64;
                    for c in 0..cols {
                        let dh = gr[c] * gam[c];
                        dx[r * cols + c] = inv_std[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                vec![dx, dgam, dbet]
            },
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, computed with
    /// log-sum-exp for stability.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Value> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::InvalidArgument {
                op: "cross_entropy",
                msg: format!("logits {s:?} vs {} labels", labels.len()),
            });
        }
        let (b, c) = (s[0], s[1]);
        for &l in labels {
            if l >= c {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    num_classes: c,
                });
            }
        }
        let a = self.to_vec();
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &a[r * c..(r + 1) * c];
            loss += log_sum_exp(row) - row[l];
        }
        loss /= b as f64;
        let labels = labels.to_vec();
        Ok(Value::from_op(vec![], vec![loss], vec![self.clone()], move |g| {
            let mut dl = vec![0.0; b * c];
            for (r, &l) in labels.iter().enumerate() {
                let row = &a[r * c..(r + 1) * c];
                stable_softmax_row(row, &mut dl[r * c..(r + 1) * c]);
                dl[r * c + l] -= 1.0;
            }
            let scale = g[0] / b as f64;
            for v in dl.iter_mut() {
                *v *= scale;
            }
            vec![dl]
        }))
    }

    /// `-log softmax(logits)[target]` for a single 1-D logit vector.
    pub fn nll_from_logits(&self, target: usize) -> Result<Value> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::InvalidArgument {
                op: "nll_from_logits",
                msg: format!("expected 1-D logits, got {s:?}"),
            });
        }
        let k = s[0];
        if target >= k {
            return Err(Error::LabelOutOfRange {
                label: target,
                num_classes: k,
            });
        }
        let a = self.to_vec();
        let loss = log_sum_exp(&a) - a[target];
        Ok(Value::from_op(vec![], vec![loss], vec![self.clone()], move |g| {
            let mut dl = vec![0.0; k];
            stable_softmax_row(&a, &mut dl);
            dl[target] -= 1.0;
            for v in dl.iter_mut() {
                *v *= g[0];
            }
            vec![dl]
        }))
    }

    /// Cosine similarity of two 1-D vectors. Defined as 0 with zero gradient
    /// when either norm falls below 1e-12, so padded positions cannot inject
    /// NaNs.
    pub fn cosine_similarity(&self, other: &Value) -> Result<Value> {
        let sims = self.cosine_rows(&other.as_matrix_row()?)?;
        sims.row_scalar(0)
    }

    /// Cosine similarity of a 1-D anchor against every row of `[K,d]`.
    pub fn cosine_rows(&self, mat: &Value) -> Result<Value> {
        let su = self.shape();
        let sm = mat.shape();
        if su.len() != 1 || sm.len() != 2 || sm[1] != su[0] {
            return Err(shape_err("cosine_rows", &su, &sm));
        }
        let d = su[0];
        let k = sm[0];
        let u = self.to_vec();
        let m = mat.to_vec();
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut sims = vec![0.0; k];
        let mut row_norms = vec![0.0; k];
        for r in 0..k {
            let vr = &m[r * d..(r + 1) * d];
            let vn = vr.iter().map(|x| x * x).sum::<f64>().sqrt();
            row_norms[r] = vn;
            if un < 1e-12 || vn < 1e-12 {
                sims[r] = 0.0;
            } else {
                let dot: f64 = u.iter().zip(vr).map(|(a, b)| a * b).sum();
                sims[r] = dot / (un * vn);
            }
        }
        let sims2 = sims.clone();
        Ok(Value::from_op(
            vec![k],
            sims,
            vec![self.clone(), mat.clone()],
            move |g| {
                let mut du = vec![0.0; d];
                let mut dm = vec![0.0; k * d];
                for r in 0..k {
                    let vn = row_norms[r];
                    if un < 1e-12 || vn < 1e-12 {
                        continue;
                    }
                    let vr = &m[r * d..(r + 1) * d];
                    let c = sims2[r];
                    let gr = g[r];
                    for i in 0..d {
                        du[i] += gr * (vr[i] / (un * vn) - c * u[i] / (un * un));
                        dm[r * d + i] = gr * (u[i] / (un * vn) - c * vr[i] / (vn * vn));
                    }
                }
                vec![du, dm]
            },
        ))
    }

    /// Multiply every element by a scalar node (broadcast); differentiable
    /// in both the tensor and the scalar.
    pub fn scale_by(&self, s: &Value) -> Result<Value> {
        if s.numel() != 1 {
            return Err(Error::InvalidArgument {
                op: "scale_by",
                msg: format!("scale must be scalar, got shape {:?}", s.shape()),
            });
        }
        let sv = s.item();
        let a = self.to_vec();
        let data: Vec<f64> = a.iter().map(|x| x * sv).collect();
        Ok(Value::from_op(
            self.shape(),
            data,
            vec![self.clone(), s.clone()],
            move |g| {
                let da = g.iter().map(|gi| gi * sv).collect();
                let ds = vec![g.iter().zip(&a).map(|(gi, ai)| gi * ai).sum()];
                vec![da, ds]
            },
        ))
    }

    /// Hard threshold at 0.5 with a straight-through backward pass: the
    /// forward value is exactly the indicator `p >= 0.5` (realized as
    /// `indicator - stopgrad(p) + p`), while the upstream gradient reaches
    /// `p` unchanged.
    pub fn straight_through_threshold(&self) -> Value {
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&p| if p >= 0.5 { 1.0 } else { 0.0 })
            .collect();
        Value::from_op(self.shape(), data, vec![self.clone()], |g| vec![g.to_vec()])
    }

    /// View a 1-D vector as a single-row matrix `[1,d]`.
    pub fn as_matrix_row(&self) -> Result<Value> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::InvalidArgument {
                op: "as_matrix_row",
                msg: format!("expected 1-D, got {s:?}"),
            });
        }
        let d = s[0];
        Ok(Value::from_op(
            vec![1, d],
            self.to_vec(),
            vec![self.clone()],
            |g| vec![g.to_vec()],
        ))
    }

    /// View a 1-D vector as a single-column matrix `[d,1]`.
    pub fn as_matrix_col(&self) -> Result<Value> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::InvalidArgument {
                op: "as_matrix_col",
                msg: format!("expected 1-D, got {s:?}"),
            });
        }
        let d = s[0];
        Ok(Value::from_op(
            vec![d, 1],
            self.to_vec(),
            vec![self.clone()],
            |g| vec![g.to_vec()],
        ))
    }

    /// Extract element `i` of a 1-D vector as a scalar.
    pub fn row_scalar(&self, i: usize) -> Result<Value> {
        let s = self.shape();
        if s.len() != 1 || i >= s[0] {
            return Err(Error::InvalidArgument {
                op: "row_scalar",
                msg: format!("index {i} of shape {s:?}"),
            });
        }
        let n = s[0];
        let x = self.data()[i];
        Ok(Value::from_op(vec![], vec![x], vec![self.clone()], move |g| {
            let mut dg = vec![0.0; n];
            dg[i] = g[0];
            vec![dg]
        }))
    }

    /// Flatten to 1-D.
    pub fn flatten(&self) -> Value {
        let n = self.numel();
        Value::from_op(vec![n], self.to_vec(), vec![self.clone()], |g| {
            vec![g.to_vec()]
        })
    }
}

/// Stack 1-D vectors of equal length into `[K,d]`.
pub fn stack_rows(parts: &[Value]) -> Result<Value> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument {
            op: "stack_rows",
            msg: "no rows".into(),
        });
    }
    let d = parts[0].numel();
    let mut data = Vec::with_capacity(parts.len() * d);
    for p in parts {
        let s = p.shape();
        if s.len() != 1 || s[0] != d {
            return Err(shape_err("stack_rows", &[d], &s));
        }
        data.extend_from_slice(&p.data());
    }
    let k = parts.len();
    Ok(Value::from_op(
        vec![k, d],
        data,
        parts.to_vec(),
        move |g| (0..k).map(|r| g[r * d..(r + 1) * d].to_vec()).collect(),
    ))
}

/// Concatenate scalars into a 1-D vector.
pub fn concat_scalars(parts: &[Value]) -> Result<Value> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument {
            op: "concat_scalars",
            msg: "no elements".into(),
        });
    }
    let mut data = Vec::with_capacity(parts.len());
    for p in parts {
        if p.numel() != 1 {
            return Err(Error::InvalidArgument {
                op: "concat_scalars",
                msg: format!("non-scalar element of shape {:?}", p.shape()),
            });
        }
        data.push(p.item());
    }
    Ok(Value::from_op(
        vec![parts.len()],
        data,
        parts.to_vec(),
        move |g| g.iter().map(|&gi| vec![gi]).collect(),
    ))
}

/// Concatenate matrices with equal row counts along columns.
pub fn concat_cols(parts: &[Value]) -> Result<Value> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument {
            op: "concat_cols",
            msg: "no parts".into(),
        });
    }
    let shapes: Vec<Vec<usize>> = parts.iter().map(Value::shape).collect();
    let m = shapes[0][0];
    for s in &shapes {
        if s.len() != 2 || s[0] != m {
            return Err(shape_err("concat_cols", &shapes[0], s));
        }
    }
    let widths: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
    let total: usize = widths.iter().sum();
    let mut data = vec![0.0; m * total];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let pd = p.data();
        for r in 0..m {
            data[r * total + off..r * total + off + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
        }
        off += w;
    }
    Ok(Value::from_op(
        vec![m, total],
        data,
        parts.to_vec(),
        move |g| {
            let mut out = Vec::with_capacity(widths.len());
            let mut off = 0;
            for &w in &widths {
                let mut dg = vec![0.0; m * w];
                for r in 0..m {
                    dg[r * w..(r + 1) * w]
                        .copy_from_slice(&g[r * total + off..r * total + off + w]);
                }
                out.push(dg);
                off += w;
            }
            out
        },
    ))
}

/// Gather rows of an embedding table; gradients scatter-add back.
pub fn embed_lookup(table: &Value, ids: &[usize]) -> Result<Value> {
    let s = table.shape();
    if s.len() != 2 {
        return Err(Error::InvalidArgument {
            op: "embed_lookup",
            msg: format!("table must be 2-D, got {s:?}"),
        });
    }
    let (v, d) = (s[0], s[1]);
    for &id in ids {
        if id >= v {
            return Err(Error::InvalidArgument {
                op: "embed_lookup",
                msg: format!("token id {id} out of range for table of {v}"),
            });
        }
    }
    let n = ids.len();
    let t = table.data();
    let mut data = vec![0.0; n * d];
    for (r, &id) in ids.iter().enumerate() {
        data[r * d..(r + 1) * d].copy_from_slice(&t[id * d..(id + 1) * d]);
    }
    drop(t);
    let ids = ids.to_vec();
    Ok(Value::from_op(
        vec![n, d],
        data,
        vec![table.clone()],
        move |g| {
            let mut dt = vec![0.0; v * d];
            for (r, &id) in ids.iter().enumerate() {
                for c in 0..d {
                    dt[id * d + c] += g[r * d + c];
                }
            }
            vec![dt]
        },
    ))
}
