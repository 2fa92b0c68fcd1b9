use rand::Rng;

use crate::encoding::{grid_pe, WavelengthEncoder};
use crate::error::{CarlError, Result};
use crate::model::layers::{trunc_normal_tensor, LayerNorm, Linear, SelfAttnBlock};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Transformer that fills in mask tokens given visible context:
/// input projection, shared mask embedding, self-attention blocks, final
/// norm and output projection back to the encoder width.
#[derive(Debug, Clone)]
pub struct Predictor {
    dim: usize,
    in_proj: Linear,
    mask_token: ParamId,
    blocks: Vec<SelfAttnBlock>,
    norm: LayerNorm,
    out_proj: Linear,
}

impl Predictor {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Predictor {
            dim,
            in_proj: Linear::new(store, &format!("{name}.in_proj"), dim, dim, std, rng),
            mask_token: store.insert(format!("{name}.mask_token"), trunc_normal_tensor(&[dim], std, rng)),
            blocks: (0..depth)
                .map(|i| SelfAttnBlock::new(store, &format!("{name}.blocks.{i}"), dim, heads, mlp_ratio, std, rng))
                .collect(),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            out_proj: Linear::new(store, &format!("{name}.out_proj"), dim, dim, std, rng),
        }
    }

    /// Runs `[context ; mask tokens]` through the blocks and returns the
    /// projected rows at the mask positions. `mask_pe` is added to the
    /// shared mask embedding and must broadcast to `[G, M, D]`; `context_pe`
    /// is added to the projected context.
    fn fill(&self, t: &mut Tape, ps: &ParamStore, context: Var, context_pe: Option<Var>, mask_pe: Var, masks: usize) -> Result<Var> {
        let s = t.shape(context).to_vec();
        let (g, n) = (s[0], s[1]);
        let mut x = self.in_proj.forward(t, ps, context)?;
        if let Some(pe) = context_pe {
            x = t.add(x, pe)?;
        }
        let tok = t.param(ps, self.mask_token);
        let base = t.constant(Tensor::zeros(&[g, masks, self.dim]));
        let m = t.add(base, tok)?;
        let m = t.add(m, mask_pe)?;
        let mut x = t.concat(&[x, m], 1)?;
        for b in &self.blocks {
            x = b.forward(t, ps, x)?;
        }
        let x = self.norm.forward(t, ps, x)?;
        let rows: Vec<usize> = (n..n + masks).collect();
        let x = t.index_select(x, 1, &rows)?;
        self.out_proj.forward(t, ps, x)
    }

    /// Spectral prediction: context is the student's representations
    /// `[B·hw, K, D]`; one mask token per masked wavelength of each image.
    /// Returns `[B·hw, M, D]`.
    pub fn predict_spectral(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        reps: Var,
        masked_wavelengths: &[&[f64]],
        encoder: &WavelengthEncoder,
    ) -> Result<Var> {
        let s = t.shape(reps).to_vec();
        let b = masked_wavelengths.len();
        let m = masked_wavelengths.first().map_or(0, |w| w.len());
        if m == 0 || masked_wavelengths.iter().any(|w| w.len() != m) {
            return Err(CarlError::validation("spectral prediction needs the same nonempty set size per image"));
        }
        if s.len() != 3 || s[2] != self.dim || b == 0 || !s[0].is_multiple_of(b) {
            return Err(CarlError::Shape {
                op: "predict_spectral",
                lhs: s,
                rhs: vec![b, m, self.dim],
            });
        }
        let hw = s[0] / b;
        let mut pe = Vec::with_capacity(b * m * self.dim);
        for w in masked_wavelengths {
            pe.extend_from_slice(encoder.encode(w)?.data());
        }
        // [B, 1, M, D] broadcast over patches, then flattened to [B·hw, M, D]
        let pe = Tensor::new(vec![b, 1, m, self.dim], pe)?;
        let expanded: Vec<f64> = pe
            .data()
            .chunks(m * self.dim)
            .flat_map(|img| std::iter::repeat_n(img, hw).flatten().copied())
            .collect();
        let pe = t.constant(Tensor::new(vec![b * hw, m, self.dim], expanded)?);
        self.fill(t, ps, reps, None, pe, m)
    }

    /// Spatial prediction for one target block: context features
    /// `[B, Nc, D]` at grid positions `context_pos`, mask tokens at
    /// `target_pos`. Returns `[B, |target|, D]`.
    pub fn predict_spatial(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        context: Var,
        grid: (usize, usize),
        context_pos: &[usize],
        target_pos: &[usize],
    ) -> Result<Var> {
        if target_pos.is_empty() {
            return Err(CarlError::validation("spatial prediction with no target positions"));
        }
        let s = t.shape(context).to_vec();
        if s.len() != 3 || s[1] != context_pos.len() || s[2] != self.dim {
            return Err(CarlError::Shape {
                op: "predict_spatial",
                lhs: s,
                rhs: vec![context_pos.len(), self.dim],
            });
        }
        let pe = grid_pe(grid.0, grid.1, self.dim)?;
        let rows = |pos: &[usize]| -> Tensor {
            let d = self.dim;
            let data = pos.iter().flat_map(|&p| pe.data()[p * d..(p + 1) * d].iter().copied()).collect();
            Tensor::from_parts(vec![pos.len(), d], data)
        };
        let ctx_pe = t.constant(rows(context_pos));
        let mask_pe = t.constant(rows(target_pos));
        self.fill(t, ps, context, Some(ctx_pe), mask_pe, target_pos.len())
    }
}
