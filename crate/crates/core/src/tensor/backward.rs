use super::gemm::{gemm, MatRef};
use super::ops::{broadcast_strides, for_each_broadcast2, gelu_grad, permute_values, reduce_to_shape, split_axis};
use super::tape::{Op, Tape, Var};
use super::Tensor;

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// `g ⊙ other` where `other` broadcasts into `g`'s shape.
fn mul_broadcast(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if g.shape() == other.shape() {
        return zip(g, other, f);
    }
    let out = g.shape();
    let so = broadcast_strides(other.shape(), out);
    let zeros = vec![0; out.len()];
    let (gd, od) = (g.data(), other.data());
    let mut v = Vec::with_capacity(gd.len());
    for_each_broadcast2(out, &zeros, &so, |k, _, io| v.push(f(gd[k], od[io])));
    Tensor::from_parts(out.to_vec(), v)
}

/// Repeats `g` (reduced along `axis`) back to `shape`, applying `f(g, index)`.
fn expand_axis(g: &Tensor, shape: &[usize], axis: usize, f: impl Fn(f64, usize) -> f64) -> Tensor {
    let (outer, len, inner) = split_axis(shape, axis);
    let gd = g.data();
    let mut v = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for j in 0..len {
            for i in 0..inner {
                let idx = o * len * inner + j * inner + i;
                v[idx] = f(gd[o * inner + i], idx);
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), v)
}

impl Tape {
    pub(crate) fn vjp(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rg(*a) {
                    self.accumulate(grads, *a, reduce_to_shape(g, val(*a).shape()));
                }
                if rg(*b) {
                    self.accumulate(grads, *b, reduce_to_shape(g, val(*b).shape()));
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    self.accumulate(grads, *a, reduce_to_shape(g, val(*a).shape()));
                }
                if rg(*b) {
                    let n = map(g, |x| -x);
                    self.accumulate(grads, *b, reduce_to_shape(&n, val(*b).shape()));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let ga = mul_broadcast(g, val(*b), |x, y| x * y);
                    self.accumulate(grads, *a, reduce_to_shape(&ga, val(*a).shape()));
                }
                if rg(*b) {
                    let gb = mul_broadcast(g, val(*a), |x, y| x * y);
                    self.accumulate(grads, *b, reduce_to_shape(&gb, val(*b).shape()));
                }
            }
            Op::Div(a, b) => {
                // out = a / b; d/da = 1/b, d/db = -out/b
                if rg(*a) {
                    let ga = mul_broadcast(g, val(*b), |x, y| x / y);
                    self.accumulate(grads, *a, reduce_to_shape(&ga, val(*a).shape()));
                }
                if rg(*b) {
                    let t = zip(g, &node.value, |x, y| -x * y);
                    let gb = mul_broadcast(&t, val(*b), |x, y| x / y);
                    self.accumulate(grads, *b, reduce_to_shape(&gb, val(*b).shape()));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, map(g, |v| v * s)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = val(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *x, permute_values(g, &inv));
            }
            Op::MatMul { a, b, ta, tb } => self.matmul_vjp(*a, *b, *ta, *tb, g, grads),
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|j| yd[base + j * inner] * gd[base + j * inner]).sum();
                        for j in 0..len {
                            let k = base + j * inner;
                            dx[k] = yd[k] * (gd[k] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *val(*x).shape().last().unwrap();
                let gd = g.data();
                let gain_v = val(*gain).data();
                if rg(*gain) || rg(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (row, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += row[j] * hrow[j];
                            db[j] += row[j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::from_parts(vec![d], dg));
                    self.accumulate(grads, *bias, Tensor::from_parts(vec![d], db));
                }
                if rg(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    let mut dh = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let grow = &gd[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dh[j] = grow[j] * gain_v[j];
                            m1 += dh[j];
                            m2 += dh[j] * hrow[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] = rs * (dh[j] - m1 - hrow[j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(val(*x).shape().to_vec(), dx));
                }
            }
            Op::Gelu(x) => self.accumulate(grads, *x, zip(g, val(*x), |gv, xv| gv * gelu_grad(xv))),
            Op::Relu(x) => self.accumulate(grads, *x, zip(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })),
            Op::Sqrt(x) => self.accumulate(grads, *x, zip(g, &node.value, |gv, y| gv * 0.5 / y)),
            Op::Square(x) => self.accumulate(grads, *x, zip(g, val(*x), |gv, xv| 2.0 * gv * xv)),
            Op::Sum { x, axis } => {
                let t = expand_axis(g, val(*x).shape(), *axis, |gv, _| gv);
                self.accumulate(grads, *x, t);
            }
            Op::Mean { x, axis } => {
                let n = val(*x).shape()[*axis] as f64;
                let t = expand_axis(g, val(*x).shape(), *axis, |gv, _| gv / n);
                self.accumulate(grads, *x, t);
            }
            Op::Variance { x, axis, correction } => {
                let xv = val(*x);
                let (outer, len, inner) = split_axis(xv.shape(), *axis);
                let xd = xv.data();
                let mut means = vec![0.0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let s: f64 = (0..len).map(|j| xd[o * len * inner + j * inner + i]).sum();
                        means[o * inner + i] = s / len as f64;
                    }
                }
                let denom = (len - correction) as f64;
                let t = expand_axis(g, xv.shape(), *axis, |gv, idx| {
                    let o = idx / (len * inner);
                    let i = idx % inner;
                    2.0 * gv * (xd[idx] - means[o * inner + i]) / denom
                });
                self.accumulate(grads, *x, t);
            }
            Op::SumAll(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(val(*x).shape(), gv));
            }
            Op::MeanAll(x) => {
                let n = val(*x).numel() as f64;
                let gv = g.item() / n;
                self.accumulate(grads, *x, Tensor::full(val(*x).shape(), gv));
            }
            Op::IndexSelect { x, axis, indices } => {
                let shape = val(*x).shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let gd = g.data();
                let mut dx = vec![0.0; outer * len * inner];
                let mut k = 0;
                for o in 0..outer {
                    for &idx in indices {
                        let start = (o * len + idx) * inner;
                        for (d, v) in dx[start..start + inner].iter_mut().zip(&gd[k..k + inner]) {
                            *d += v;
                        }
                        k += inner;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape.to_vec(), dx));
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let gd = g.data();
                let mut offset = 0;
                for &v in inputs {
                    let shape = val(v).shape();
                    let len = shape[*axis];
                    if rg(v) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            part.extend_from_slice(&gd[start..start + len * inner]);
                        }
                        self.accumulate(grads, v, Tensor::from_parts(shape.to_vec(), part));
                    }
                    offset += len;
                }
            }
            Op::CrossEntropy { logits, labels, probs, count } => {
                let k = val(*logits).shape()[1];
                let scale = g.item() / *count as f64;
                let mut d = vec![0.0; probs.len()];
                for (r, label) in labels.iter().enumerate() {
                    if let Some(l) = label {
                        for j in 0..k {
                            d[r * k + j] = scale * probs[r * k + j];
                        }
                        d[r * k + l] -= scale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_parts(val(*logits).shape().to_vec(), d));
            }
        }
    }

    fn matmul_vjp(&self, a: Var, b: Var, ta: bool, tb: bool, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (sa, sb) = (av.shape(), bv.shape());
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, _) = if ta { (ac, ar) } else { (ar, ac) };
        let n = if tb { br } else { bc };
        let b_shared = sb.len() == 2;
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let (ad, bd, gd) = (av.data(), bv.data(), g.data());

        if self.nodes[a.0].requires_grad {
            let mut da = vec![0.0; ad.len()];
            for i in 0..batch {
                let boff = if b_shared { 0 } else { i * br * bc };
                let bm = MatRef::new(&bd[boff..], br, bc);
                let op_b = if tb { bm.t() } else { bm };
                let gm = MatRef::new(&gd[i * m * n..], m, n);
                let out = &mut da[i * ar * ac..(i + 1) * ar * ac];
                if ta {
                    gemm(1.0, op_b, gm.t(), 0.0, out);
                } else {
                    gemm(1.0, gm, op_b.t(), 0.0, out);
                }
            }
            self.accumulate(grads, a, Tensor::from_parts(sa.to_vec(), da));
        }
        if self.nodes[b.0].requires_grad {
            let mut db = vec![0.0; bd.len()];
            if b_shared && !ta {
                let am = MatRef::new(ad, batch * m, ac);
                let gm = MatRef::new(gd, batch * m, n);
                if tb {
                    gemm(1.0, gm.t(), am, 0.0, &mut db);
                } else {
                    gemm(1.0, am.t(), gm, 0.0, &mut db);
                }
            } else {
                for i in 0..batch {
                    let am = MatRef::new(&ad[i * ar * ac..], ar, ac);
                    let op_a = if ta { am.t() } else { am };
                    let gm = MatRef::new(&gd[i * m * n..], m, n);
                    let (off, beta) = if b_shared { (0, 1.0) } else { (i * br * bc, 0.0) };
                    let out = &mut db[off..off + br * bc];
                    if tb {
                        gemm(1.0, gm.t(), op_a, beta, out);
                    } else {
                        gemm(1.0, op_a.t(), gm, beta, out);
                    }
                }
            }
            self.accumulate(grads, b, Tensor::from_parts(sb.to_vec(), db));
        }
    }
}
