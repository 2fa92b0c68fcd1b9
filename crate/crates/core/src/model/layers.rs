//! Transformer building blocks over `[G, N, D]` token tensors.

use rand::Rng;

use crate::error::{CarlError, Result};
use crate::rng::truncated_normal;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub(crate) fn trunc_normal_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| truncated_normal(rng, std))
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.insert(format!("{name}.weight"), trunc_normal_tensor(&[fan_in, fan_out], std, rng));
        let b = store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = t.param(ps, self.w);
        let b = t.param(ps, self.b);
        t.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.insert(format!("{name}.weight"), Tensor::ones(&[dim])),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let g = t.param(ps, self.gain);
        let b = t.param(ps, self.bias);
        t.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, ratio: usize, std: f64, rng: &mut R) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * ratio, std, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim * ratio, dim, std, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(t, ps, x)?;
        let h = t.gelu(h);
        self.fc2.forward(t, ps, h)
    }
}

/// Multi-head projections shared by self- and cross-attention.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, std: f64, rng: &mut R) -> Self {
        Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, std, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, std, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, std, rng),
            out: Linear::new(store, &format!("{name}.proj"), dim, dim, std, rng),
            heads,
        }
    }

    /// Queries from `xq: [G, Nq, D]`, keys and values from `xkv: [G, Nk, D]`.
    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, xq: Var, xkv: Var) -> Result<Var> {
        let sq = t.shape(xq).to_vec();
        let sk = t.shape(xkv).to_vec();
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(CarlError::Shape {
                op: "attention",
                lhs: sq,
                rhs: sk,
            });
        }
        let (g, nq, d) = (sq[0], sq[1], sq[2]);
        let nk = sk[1];
        let h = self.heads;
        let dh = d / h;
        let q = self.q.forward(t, ps, xq)?;
        let k = self.k.forward(t, ps, xkv)?;
        let v = self.v.forward(t, ps, xkv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mixed = if h == 1 {
            let s = t.matmul_nt(q, k)?;
            let s = t.scale(s, scale);
            let p = t.softmax(s, 2)?;
            t.matmul(p, v)?
        } else {
            let split = |t: &mut Tape, x: Var, n: usize| -> Result<Var> {
                let x = t.reshape(x, &[g, n, h, dh])?;
                t.permute(x, &[0, 2, 1, 3])
            };
            let q = split(t, q, nq)?;
            let k = split(t, k, nk)?;
            let v = split(t, v, nk)?;
            let s = t.matmul_nt(q, k)?;
            let s = t.scale(s, scale);
            let p = t.softmax(s, 3)?;
            let o = t.matmul(p, v)?;
            let o = t.permute(o, &[0, 2, 1, 3])?;
            t.reshape(o, &[g, nq, d])?
        };
        self.out.forward(t, ps, mixed)
    }
}

/// Pre-norm transformer block: `x + attn(LN(x))`, then `x + mlp(LN(x))`.
#[derive(Debug, Clone)]
pub struct SelfAttnBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl SelfAttnBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ratio: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        SelfAttnBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, std, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, ratio, std, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm1.forward(t, ps, x)?;
        let a = self.attn.forward(t, ps, h, h)?;
        let x = t.add(x, a)?;
        let h = self.norm2.forward(t, ps, x)?;
        let m = self.mlp.forward(t, ps, h)?;
        t.add(x, m)
    }
}

/// Latents attend to a context: `q + attn(LN_q(q), LN_kv(ctx))`, then MLP.
/// The context is read but never updated.
#[derive(Debug, Clone)]
pub struct CrossAttnBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl CrossAttnBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ratio: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        CrossAttnBlock {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), dim),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, std, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, ratio, std, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, latents: Var, context: Var) -> Result<Var> {
        let q = self.norm_q.forward(t, ps, latents)?;
        let kv = self.norm_kv.forward(t, ps, context)?;
        let a = self.attn.forward(t, ps, q, kv)?;
        let x = t.add(latents, a)?;
        let h = self.norm2.forward(t, ps, x)?;
        let m = self.mlp.forward(t, ps, h)?;
        t.add(x, m)
    }
}
