//! Differentiable operations recorded on a [`Tape`].

use std::rc::Rc;

use super::kernel::{gemm, matmul_rm, View, ViewMut};
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Added to cosine denominators so zero rows give zero similarity.
pub const COSINE_EPS: f64 = 1e-12;
/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::invalid(
            op,
            format!("expected a 2-D tensor, got shape {:?}", t.shape()),
        )),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts_unchecked(a.shape().to_vec(), data)
}

/// Window `[floor(i*len/out), ceil((i+1)*len/out))` of adaptive pooling.
pub fn pool_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

fn gelu_value(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("add", a.value(), b.value())?;
        let out = zip_map(a.value(), b.value(), |x, y| x + y);
        self.record("add", out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("sub", a.value(), b.value())?;
        let out = zip_map(a.value(), b.value(), |x, y| x - y);
        self.record("sub", out, &[a, b], |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        })
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("mul", a.value(), b.value())?;
        let out = zip_map(a.value(), b.value(), |x, y| x * y);
        let (av, bv) = (a.rc(), b.rc());
        self.record("mul", out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| zip_map(g, &bv, |g, y| g * y)),
                needs[1].then(|| zip_map(g, &av, |g, x| g * x)),
            ]
        })
    }

    pub fn scale(&self, a: &Var, c: f64) -> Result<Var> {
        let out = a.value().map(|x| x * c);
        self.record("scale", out, &[a], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn relu(&self, a: &Var) -> Result<Var> {
        let out = a.value().map(|x| x.max(0.0));
        let av = a.rc();
        self.record("relu", out, &[a], move |g, _| {
            vec![Some(zip_map(g, &av, |g, x| if x > 0.0 { g } else { 0.0 }))]
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: &Var) -> Result<Var> {
        let out = a.value().map(gelu_value);
        let av = a.rc();
        self.record("gelu", out, &[a], move |g, _| {
            vec![Some(zip_map(g, &av, |g, x| g * gelu_grad(x)))]
        })
    }

    pub fn exp(&self, a: &Var) -> Result<Var> {
        let out = a.value().map(f64::exp);
        let ov = Rc::new(out.clone());
        self.record("exp", out, &[a], move |g, _| {
            vec![Some(zip_map(g, &ov, |g, y| g * y))]
        })
    }

    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", a.value())?;
        let (k2, n) = matrix_dims("matmul", b.value())?;
        if k != k2 {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let out = matmul_rm(a.value().data(), b.value().data(), m, k, n);
        let out = Tensor::from_parts_unchecked(vec![m, n], out);
        let (av, bv) = (a.rc(), b.rc());
        self.record("matmul", out, &[a, b], move |g, needs| {
            let da = needs[0].then(|| {
                let mut d = vec![0.0; m * k];
                gemm(
                    1.0,
                    View::row_major(g.data(), m, n),
                    View::transposed(bv.data(), k, n),
                    0.0,
                    ViewMut::row_major(&mut d, m, k),
                );
                Tensor::from_parts_unchecked(vec![m, k], d)
            });
            let db = needs[1].then(|| {
                let mut d = vec![0.0; k * n];
                gemm(
                    1.0,
                    View::transposed(av.data(), m, k),
                    View::row_major(g.data(), m, n),
                    0.0,
                    ViewMut::row_major(&mut d, k, n),
                );
                Tensor::from_parts_unchecked(vec![k, n], d)
            });
            vec![da, db]
        })
    }

    /// Max-shifted log-softmax over the last axis.
    pub fn log_softmax(&self, x: &Var) -> Result<Var> {
        let xv = x.value();
        let d = xv.last_dim();
        if d == 0 {
            return Err(Error::invalid("log_softmax", "empty last axis"));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ov = Rc::new(out.clone());
        self.record("log_softmax", out, &[x], move |g, _| {
            let mut dx = g.clone();
            for r in 0..dx.rows() {
                let gsum: f64 = g.row(r).iter().sum();
                for (dv, y) in dx.row_mut(r).iter_mut().zip(ov.row(r)) {
                    *dv -= y.exp() * gsum;
                }
            }
            vec![Some(dx)]
        })
    }

    pub fn sum(&self, x: &Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&self, x: &Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    fn reduce(&self, x: &Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let op = if mean { "mean" } else { "sum" };
        let xv = x.value();
        let shape = xv.shape().to_vec();
        let (outer, n, inner, out_shape) = match axis {
            None => (1, xv.len(), 1, vec![1]),
            Some(ax) if ax < shape.len() => {
                let outer = shape[..ax].iter().product();
                let inner = shape[ax + 1..].iter().product();
                let mut s = shape.clone();
                s.remove(ax);
                if s.is_empty() {
                    s.push(1);
                }
                (outer, shape[ax], inner, s)
            }
            Some(ax) => {
                return Err(Error::IndexOutOfRange {
                    op,
                    index: ax,
                    len: shape.len(),
                })
            }
        };
        if mean && n == 0 {
            return Err(Error::invalid(op, "mean over an empty axis"));
        }
        let w = if mean { 1.0 / n as f64 } else { 1.0 };
        let data = xv.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += data[base + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v *= w);
        }
        let out = Tensor::from_parts_unchecked(out_shape, out);
        self.record(op, out, &[x], move |g, _| {
            let gd = g.data();
            let mut dx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for j in 0..n {
                    let base = (o * n + j) * inner;
                    for i in 0..inner {
                        dx[base + i] = gd[o * inner + i] * w;
                    }
                }
            }
            vec![Some(Tensor::from_parts_unchecked(shape.clone(), dx))]
        })
    }

    /// Cosine similarity between every row of `a` `[P, D]` and of `b` `[Q, D]`.
    pub fn cosine_rows(&self, a: &Var, b: &Var) -> Result<Var> {
        let (p, d) = matrix_dims("cosine_rows", a.value())?;
        let (q, d2) = matrix_dims("cosine_rows", b.value())?;
        if d != d2 || d == 0 {
            return Err(Error::shape("cosine_rows", a.shape(), b.shape()));
        }
        let norms = |t: &Tensor, n: usize| -> Vec<f64> {
            (0..n)
                .map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        };
        let na = norms(a.value(), p);
        let nb = norms(b.value(), q);
        let dots = matmul_rm(
            a.value().data(),
            &{
                let mut bt = vec![0.0; d * q];
                for j in 0..q {
                    for (c, v) in b.value().row(j).iter().enumerate() {
                        bt[c * q + j] = *v;
                    }
                }
                bt
            },
            p,
            d,
            q,
        );
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                out[i * q + j] = dots[i * q + j] / (na[i] * nb[j] + COSINE_EPS);
            }
        }
        let out = Tensor::from_parts_unchecked(vec![p, q], out);
        let (av, bv) = (a.rc(), b.rc());
        self.record("cosine_rows", out, &[a, b], move |g, needs| {
            let g = g.data();
            let mut da = needs[0].then(|| vec![0.0; p * d]);
            let mut db = needs[1].then(|| vec![0.0; q * d]);
            for i in 0..p {
                let ai = av.row(i);
                for j in 0..q {
                    let gij = g[i * q + j];
                    if gij == 0.0 {
                        continue;
                    }
                    let bj = bv.row(j);
                    let den = na[i] * nb[j] + COSINE_EPS;
                    let s = dots[i * q + j];
                    if let Some(da) = da.as_mut() {
                        let row = &mut da[i * d..(i + 1) * d];
                        let self_coef = if na[i] > 0.0 {
                            gij * s * nb[j] / (na[i] * den * den)
                        } else {
                            0.0
                        };
                        for c in 0..d {
                            row[c] += gij * bj[c] / den - self_coef * ai[c];
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        let row = &mut db[j * d..(j + 1) * d];
                        let self_coef = if nb[j] > 0.0 {
                            gij * s * na[i] / (nb[j] * den * den)
                        } else {
                            0.0
                        };
                        for c in 0..d {
                            row[c] += gij * ai[c] / den - self_coef * bj[c];
                        }
                    }
                }
            }
            vec![
                da.map(|v| Tensor::from_parts_unchecked(vec![p, d], v)),
                db.map(|v| Tensor::from_parts_unchecked(vec![q, d], v)),
            ]
        })
    }

    /// Mean smooth-L1 between `pred` and a detached `target`.
    pub fn smooth_l1(&self, pred: &Var, target: &Tensor, delta: f64) -> Result<Var> {
        same_shape("smooth_l1", pred.value(), target)?;
        if !(delta > 0.0) {
            return Err(Error::invalid("smooth_l1", "delta must be positive"));
        }
        let n = pred.value().len();
        if n == 0 {
            return Err(Error::invalid("smooth_l1", "empty input"));
        }
        let diff = zip_map(pred.value(), target, |x, y| x - y);
        let total: f64 = diff
            .data()
            .iter()
            .map(|&d| {
                if d.abs() < delta {
                    0.5 * d * d / delta
                } else {
                    d.abs() - 0.5 * delta
                }
            })
            .sum();
        let out = Tensor::scalar(total / n as f64);
        self.record("smooth_l1", out, &[pred], move |g, _| {
            let w = g.data()[0] / n as f64;
            vec![Some(diff.map(|d| {
                if d.abs() < delta {
                    w * d / delta
                } else {
                    w * d.signum()
                }
            }))]
        })
    }

    /// 1-D adaptive average pooling of `[L, C]` along the first axis.
    pub fn adaptive_avg_pool_1d(&self, x: &Var, out_len: usize) -> Result<Var> {
        let (l, c) = matrix_dims("adaptive_avg_pool_1d", x.value())?;
        let grid = self.reshape(x, vec![l, 1, c])?;
        let pooled = self.adaptive_avg_pool_2d(&grid, (out_len, 1))?;
        self.reshape(&pooled, vec![out_len, c])
    }

    /// 2-D adaptive average pooling of `[H, W, C]` to `[h, w, C]`.
    pub fn adaptive_avg_pool_2d(&self, x: &Var, out: (usize, usize)) -> Result<Var> {
        let (h, w, c) = match *x.shape() {
            [h, w, c] => (h, w, c),
            _ => {
                return Err(Error::invalid(
                    "adaptive_avg_pool",
                    format!("expected [H, W, C], got {:?}", x.shape()),
                ))
            }
        };
        let (oh, ow) = out;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(Error::invalid(
                "adaptive_avg_pool",
                format!("output {oh}x{ow} invalid for input {h}x{w}"),
            ));
        }
        let xd = x.value().data();
        let mut data = vec![0.0; oh * ow * c];
        for i in 0..oh {
            let (r0, r1) = pool_window(i, h, oh);
            for j in 0..ow {
                let (c0, c1) = pool_window(j, w, ow);
                let inv = 1.0 / ((r1 - r0) * (c1 - c0)) as f64;
                let dst = &mut data[(i * ow + j) * c..(i * ow + j + 1) * c];
                for r in r0..r1 {
                    for s in c0..c1 {
                        let src = &xd[(r * w + s) * c..(r * w + s + 1) * c];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                dst.iter_mut().for_each(|d| *d *= inv);
            }
        }
        let value = Tensor::from_parts_unchecked(vec![oh, ow, c], data);
        self.record("adaptive_avg_pool", value, &[x], move |g, _| {
            let gd = g.data();
            let mut dx = vec![0.0; h * w * c];
            for i in 0..oh {
                let (r0, r1) = pool_window(i, h, oh);
                for j in 0..ow {
                    let (c0, c1) = pool_window(j, w, ow);
                    let inv = 1.0 / ((r1 - r0) * (c1 - c0)) as f64;
                    let src = &gd[(i * ow + j) * c..(i * ow + j + 1) * c];
                    for r in r0..r1 {
                        for s in c0..c1 {
                            let dst = &mut dx[(r * w + s) * c..(r * w + s + 1) * c];
                            for (d, v) in dst.iter_mut().zip(src) {
                                *d += v * inv;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts_unchecked(vec![h, w, c], dx))]
        })
    }

    /// Rows of `table` at `ids`; backward scatter-adds into the table.
    pub fn embedding(&self, table: &Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = matrix_dims("embedding", table.value())?;
        let out = table.value().select_rows(ids).map_err(|e| match e {
            Error::IndexOutOfRange { index, len, .. } => Error::IndexOutOfRange {
                op: "embedding",
                index,
                len,
            },
            other => other,
        })?;
        let ids = ids.to_vec();
        self.record("embedding", out, &[table], move |g, _| {
            let mut dt = Tensor::zeros(vec![v, d]);
            for (r, &id) in ids.iter().enumerate() {
                for (dst, src) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                    *dst += src;
                }
            }
            vec![Some(dt)]
        })
    }

    /// Row gather used for matched-token selection; same rule as `embedding`.
    pub fn gather_rows(&self, x: &Var, ids: &[usize]) -> Result<Var> {
        self.embedding(x, ids)
    }

    /// Per-row normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        let d = x.value().last_dim();
        if d < 2 {
            return Err(Error::invalid("layer_norm", "feature dim must be >= 2"));
        }
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
        }
        let rows = x.value().rows();
        let mut xhat = x.value().clone();
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std[r] = is;
        }
        let (gv, bv) = (gain.value().data(), bias.value().data());
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, g), b) in out.row_mut(r).iter_mut().zip(gv).zip(bv) {
                *o = *o * g + b;
            }
        }
        let gain_rc = gain.rc();
        self.record("layer_norm", out, &[x, gain, bias], move |g, needs| {
            let gv = gain_rc.data();
            let dx = needs[0].then(|| {
                let mut dx = Tensor::zeros(xhat.shape().to_vec());
                for r in 0..rows {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_x = 0.0;
                    for c in 0..d {
                        let dxh = gr[c] * gv[c];
                        mean_dxh += dxh;
                        mean_dxh_x += dxh * xr[c];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_x /= d as f64;
                    let out = dx.row_mut(r);
                    for c in 0..d {
                        out[c] = inv_std[r] * (gr[c] * gv[c] - mean_dxh - xr[c] * mean_dxh_x);
                    }
                }
                dx
            });
            let dgain = needs[1].then(|| {
                let mut dg = vec![0.0; d];
                for r in 0..rows {
                    for ((acc, gr), xr) in dg.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                        *acc += gr * xr;
                    }
                }
                Tensor::vector(dg)
            });
            let dbias = needs[2].then(|| {
                let mut db = vec![0.0; d];
                for r in 0..rows {
                    for (acc, gr) in db.iter_mut().zip(g.row(r)) {
                        *acc += gr;
                    }
                }
                Tensor::vector(db)
            });
            vec![dx, dgain, dbias]
        })
    }

    pub fn reshape(&self, x: &Var, shape: Vec<usize>) -> Result<Var> {
        let out = x.value().reshape(shape)?;
        let orig = x.shape().to_vec();
        self.record("reshape", out, &[x], move |g, _| {
            vec![Some(Tensor::from_parts_unchecked(
                orig.clone(),
                g.data().to_vec(),
            ))]
        })
    }

    /// Rows `[start, end)` of a 2-D tensor.
    pub fn slice_rows(&self, x: &Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = matrix_dims("slice_rows", x.value())?;
        if start > end || end > n {
            return Err(Error::invalid(
                "slice_rows",
                format!("range {start}..{end} out of bounds for {n} rows"),
            ));
        }
        let out = Tensor::from_parts_unchecked(
            vec![end - start, d],
            x.value().data()[start * d..end * d].to_vec(),
        );
        self.record("slice_rows", out, &[x], move |g, _| {
            let mut dx = vec![0.0; n * d];
            dx[start * d..end * d].copy_from_slice(g.data());
            vec![Some(Tensor::from_parts_unchecked(vec![n, d], dx))]
        })
    }

    /// Stacks 2-D tensors with a shared column count.
    pub fn concat_rows(&self, parts: &[&Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let (_, d) = matrix_dims("concat_rows", first.value())?;
        let mut counts = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            let (r, dp) = matrix_dims("concat_rows", p.value())?;
            if dp != d {
                return Err(Error::shape("concat_rows", first.shape(), p.shape()));
            }
            counts.push(r);
            data.extend_from_slice(p.value().data());
        }
        let total: usize = counts.iter().sum();
        let out = Tensor::from_parts_unchecked(vec![total, d], data);
        self.record("concat_rows", out, parts, move |g, needs| {
            let mut offset = 0;
            counts
                .iter()
                .zip(needs)
                .map(|(&r, &need)| {
                    let part = need.then(|| {
                        Tensor::from_parts_unchecked(
                            vec![r, d],
                            g.data()[offset * d..(offset + r) * d].to_vec(),
                        )
                    });
                    offset += r;
                    part
                })
                .collect()
        })
    }

    /// `out[i] = x[i, idx[i]]` for a 2-D `x`.
    pub fn pick(&self, x: &Var, idx: &[usize]) -> Result<Var> {
        let (n, v) = matrix_dims("pick", x.value())?;
        if idx.len() != n {
            return Err(Error::shape("pick", x.shape(), &[idx.len()]));
        }
        let mut out = Vec::with_capacity(n);
        for (r, &j) in idx.iter().enumerate() {
            if j >= v {
                return Err(Error::IndexOutOfRange {
                    op: "pick",
                    index: j,
                    len: v,
                });
            }
            out.push(x.value().row(r)[j]);
        }
        let idx = idx.to_vec();
        self.record("pick", Tensor::vector(out), &[x], move |g, _| {
            let mut dx = Tensor::zeros(vec![n, v]);
            for (r, &j) in idx.iter().enumerate() {
                dx.row_mut(r)[j] = g.data()[r];
            }
            vec![Some(dx)]
        })
    }

    /// Multi-head causal self-attention over `[N, D]` queries, keys, values.
    /// Position `i` attends to positions `0..=i`.
    pub fn causal_attention(&self, q: &Var, k: &Var, v: &Var, heads: usize) -> Result<Var> {
        let (n, d) = matrix_dims("causal_attention", q.value())?;
        if k.shape() != q.shape() || v.shape() != q.shape() {
            return Err(Error::shape("causal_attention", q.shape(), k.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(
                "causal_attention",
                format!("hidden dim {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (q.rc(), k.rc(), v.rc());
        let mut out = vec![0.0; n * d];
        let mut probs = vec![0.0; heads * n * n];
        for h in 0..heads {
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            gemm(
                scale,
                View::columns(qv.data(), n, d, h * dh, dh),
                View::columns(kv.data(), n, d, h * dh, dh).t(),
                0.0,
                ViewMut::row_major(p, n, n),
            );
            for i in 0..n {
                let row = &mut p[i * n..(i + 1) * n];
                let max = row[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in row[..=i].iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for s in row[..=i].iter_mut() {
                    *s /= z;
                }
                row[i + 1..].fill(0.0);
            }
            gemm(
                1.0,
                View::row_major(p, n, n),
                View::columns(vv.data(), n, d, h * dh, dh),
                0.0,
                ViewMut::columns(&mut out, n, d, h * dh, dh),
            );
        }
        let out = Tensor::from_parts_unchecked(vec![n, d], out);
        self.record("causal_attention", out, &[q, k, v], move |g, needs| {
            let gd = g.data();
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut ds = vec![0.0; n * n];
            for h in 0..heads {
                let p = &probs[h * n * n..(h + 1) * n * n];
                if needs[2] {
                    gemm(
                        1.0,
                        View::transposed(p, n, n),
                        View::columns(gd, n, d, h * dh, dh),
                        0.0,
                        ViewMut::columns(&mut dv, n, d, h * dh, dh),
                    );
                }
                if !(needs[0] || needs[1]) {
                    continue;
                }
                gemm(
                    1.0,
                    View::columns(gd, n, d, h * dh, dh),
                    View::columns(vv.data(), n, d, h * dh, dh).t(),
                    0.0,
                    ViewMut::row_major(&mut ds, n, n),
                );
                for i in 0..n {
                    let pr = &p[i * n..(i + 1) * n];
                    let dr = &mut ds[i * n..(i + 1) * n];
                    let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                    dr[i + 1..].fill(0.0);
                }
                if needs[0] {
                    gemm(
                        scale,
                        View::row_major(&ds, n, n),
                        View::columns(kv.data(), n, d, h * dh, dh),
                        0.0,
                        ViewMut::columns(&mut dq, n, d, h * dh, dh),
                    );
                }
                if needs[1] {
                    gemm(
                        scale,
                        View::transposed(&ds, n, n),
                        View::columns(qv.data(), n, d, h * dh, dh),
                        0.0,
                        ViewMut::columns(&mut dk, n, d, h * dh, dh),
                    );
                }
            }
            let wrap = |need: bool, data: Vec<f64>| {
                need.then(|| Tensor::from_parts_unchecked(vec![n, d], data))
            };
            vec![wrap(needs[0], dq), wrap(needs[1], dk), wrap(needs[2], dv)]
        })
    }
}
