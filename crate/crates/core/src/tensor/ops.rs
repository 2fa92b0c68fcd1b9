use super::gemm::{gemm, MatRef};
use super::tape::{Op, Tape, Var};
use super::Tensor;
use crate::error::{CarlError, Result};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = Vec::with_capacity(r);
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        let d = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return None;
        };
        out.push(d);
    }
    Some(out)
}

/// Strides of `shape` viewed in the rank of `out`, zero along broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let mut strides = vec![0; r];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        let o = r - shape.len() + i;
        strides[o] = if shape[i] == 1 && out[o] != 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Calls `f(out_index, offset_a, offset_b)` for every element of `out`.
pub(crate) fn for_each_broadcast2(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let r = out.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[r - 1];
    let (la, lb) = (sa[r - 1], sb[r - 1]);
    let rows: usize = out[..r - 1].iter().product();
    let mut idx = vec![0usize; r - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut k = 0;
    for _ in 0..rows {
        for j in 0..last {
            f(k, oa + j * la, ob + j * lb);
            k += 1;
        }
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn binary_values(a: &Tensor, b: &Tensor, out: &[usize], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if a.shape() == b.shape() {
        return a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    }
    let (ad, bd) = (a.data(), b.data());
    // Common case: b repeats along leading axes of a (bias, positional encodings).
    if a.shape() == out && out.ends_with(b.shape()) {
        let n = bd.len();
        return ad
            .chunks(n)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
    }
    let sa = broadcast_strides(a.shape(), out);
    let sb = broadcast_strides(b.shape(), out);
    let mut v = Vec::with_capacity(out.iter().product());
    for_each_broadcast2(out, &sa, &sb, |_, ia, ib| v.push(f(ad[ia], bd[ib])));
    v
}

/// Sums `g` (shaped like a broadcast result) down to `target`.
pub(crate) fn reduce_to_shape(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let out = g.shape();
    let mut acc = vec![0.0; target.iter().product()];
    if out.ends_with(target) {
        let n = acc.len();
        for row in g.data().chunks(n) {
            for (a, x) in acc.iter_mut().zip(row) {
                *a += x;
            }
        }
    } else {
        let st = broadcast_strides(target, out);
        let zeros = vec![0; out.len()];
        let gd = g.data();
        for_each_broadcast2(out, &st, &zeros, |k, it, _| acc[it] += gd[k]);
    }
    Tensor::from_parts(target.to_vec(), acc)
}

/// `(outer, len, inner)` split of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn permute_values(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    let r = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; r];
    let xd = x.data();
    let mut v = Vec::with_capacity(x.numel());
    for_each_broadcast2(&out_shape, &strides, &zeros, |_, i, _| v.push(xd[i]));
    Tensor::from_parts(out_shape, v)
}

impl Tape {
    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(CarlError::Axis { op, axis, rank });
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, make: fn(Var, Var) -> Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb).ok_or_else(|| CarlError::Shape {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let v = binary_values(self.value(a), self.value(b), &out, f);
        Ok(self.push(Tensor::from_parts(out, v), make(a, b), &[a, b]))
    }

    /// Element-wise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let v = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&e| f(e)).collect());
        self.push(v, op, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |e| e * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |e| e + s, Op::AddScalar(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |e| e.max(0.0), Op::Relu(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |e| e * e, Op::Square(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let r = self.shape(x).len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(CarlError::Shape {
                op: "permute",
                lhs: self.shape(x).to_vec(),
                rhs: perm.to_vec(),
            });
        }
        let v = permute_values(self.value(x), perm);
        Ok(self.push(v, Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn transpose(&mut self, x: Var, i: usize, j: usize) -> Result<Var> {
        let r = self.shape(x).len();
        self.check_axis("transpose", x, i.max(j))?;
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(i, j);
        self.permute(x, &perm)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    /// Batched matrix product over the last two axes, optionally transposing
    /// either operand. `b` either shares `a`'s leading batch axes or is a plain
    /// matrix applied to every batch entry.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || CarlError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        let batch_dims = &sa[..sa.len() - 2];
        let b_shared = sb.len() == 2;
        if k != k2 || (!b_shared && &sb[..sb.len() - 2] != batch_dims) {
            return Err(err());
        }
        let batch: usize = batch_dims.iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if b_shared && !ta {
            let bm = MatRef::new(bd, br, bc);
            gemm(1.0, MatRef::new(ad, batch * m, k), if tb { bm.t() } else { bm }, 0.0, &mut out);
        } else {
            for i in 0..batch {
                let am = MatRef::new(&ad[i * m * k..], ar, ac);
                let boff = if b_shared { 0 } else { i * k * n };
                let bm = MatRef::new(&bd[boff..], br, bc);
                gemm(
                    1.0,
                    if ta { am.t() } else { am },
                    if tb { bm.t() } else { bm },
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let mut shape = batch_dims.to_vec();
        shape.extend([m, n]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    /// `x · w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let xd = t.data();
        let mut y = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(xd[base + j * inner]);
                }
                let mut s = 0.0;
                for j in 0..len {
                    let e = (xd[base + j * inner] - mx).exp();
                    y[base + j * inner] = e;
                    s += e;
                }
                for j in 0..len {
                    y[base + j * inner] /= s;
                }
            }
        }
        let v = Tensor::from_parts(t.shape().to_vec(), y);
        Ok(self.push(v, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes the last axis to zero mean and unit variance
    /// (population variance plus 1e-6), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(CarlError::Axis {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(CarlError::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * g[j] + b[j];
            }
        }
        let v = Tensor::from_parts(shape, y);
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    fn reduce_axis(&mut self, op: &'static str, x: Var, axis: usize, f: impl Fn(&[f64], usize) -> f64, node: Op) -> Result<Var> {
        self.check_axis(op, x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let xd = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (j, slot) in buf.iter_mut().enumerate() {
                    *slot = xd[o * len * inner + j * inner + i];
                }
                out.push(f(&buf, len));
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(Tensor::from_parts(shape, out), node, &[x]))
    }

    /// Sum along `axis`; the axis is removed.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("sum", x, axis, |v, _| v.iter().sum(), Op::Sum { x, axis })
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("mean", x, axis, |v, n| v.iter().sum::<f64>() / n as f64, Op::Mean { x, axis })
    }

    /// Variance along `axis` normalized by `n - correction`
    /// (0 for population variance, 1 for the unbiased estimate).
    pub fn variance(&mut self, x: Var, axis: usize, correction: usize) -> Result<Var> {
        self.check_axis("variance", x, axis)?;
        let n = self.shape(x)[axis];
        if n <= correction {
            return Err(CarlError::validation(format!(
                "variance over {n} elements with correction {correction}"
            )));
        }
        self.reduce_axis(
            "variance",
            x,
            axis,
            move |v, n| {
                let m = v.iter().sum::<f64>() / n as f64;
                v.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (n - correction) as f64
            },
            Op::Variance { x, axis, correction },
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Gathers `indices` along `axis` (indices may repeat).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.check_axis("index_select", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        if indices.is_empty() {
            return Err(CarlError::validation("index_select with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(CarlError::validation(format!(
                "index_select: index {bad} out of range for axis of length {len}"
            )));
        }
        let xd = t.data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * len + i) * inner;
                out.extend_from_slice(&xd[start..start + inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = indices.len();
        let node = Op::IndexSelect {
            x,
            axis,
            indices: indices.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(shape, out), node, &[x]))
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| CarlError::validation("concat of zero tensors"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(CarlError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let node = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        Ok(self.push(Tensor::from_parts(shape, out), node, inputs))
    }

    /// Mean cross-entropy of `logits: [N, classes]` over rows whose label is
    /// `Some`. Rows labelled `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let s = t.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(CarlError::Shape {
                op: "cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let k = s[1];
        if let Some(bad) = labels.iter().flatten().find(|&&l| l >= k) {
            return Err(CarlError::validation(format!("label {bad} out of range for {k} classes")));
        }
        let count = labels.iter().flatten().count();
        if count == 0 {
            return Err(CarlError::validation("cross_entropy with no labelled rows"));
        }
        let xd = t.data();
        let mut probs = vec![0.0; xd.len()];
        let mut loss = 0.0;
        for (r, label) in labels.iter().enumerate() {
            let row = &xd[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
            if let Some(l) = label {
                loss += lse - row[*l];
            }
        }
        let node = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
            count,
        };
        Ok(self.push(Tensor::scalar(loss / count as f64), node, &[logits]))
    }
}
