use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::CarlConfig;
use super::layers::{trunc_normal_tensor, CrossAttnBlock, LayerNorm, Linear, SelfAttnBlock};
use crate::encoding::{discrete_pe, grid_pe, WavelengthEncoder};
use crate::error::{CarlError, Result};
use crate::io::image::{SpectralImage, UNLABELED};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Output head attached after the spatial encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    /// Per-patch linear classifier; logits are repeated to every pixel of the patch.
    Segmentation { classes: usize },
    /// Linear classifier over the mean of all patch features.
    Classification { classes: usize },
    /// Spatial features as-is.
    Identity,
}

/// What the spectral encoder was handed in one call.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCall {
    pub grad_enabled: bool,
    pub wavelengths: Vec<Vec<f64>>,
    pub token_rows: usize,
}

pub type SpectralObserver = Arc<dyn Fn(&SpectralCall) + Send + Sync>;

#[derive(Clone)]
pub struct CarlModel {
    config: CarlConfig,
    head: Head,
    encoder: WavelengthEncoder,
    rep_pe: Tensor,
    proj: Linear,
    reps: ParamId,
    spectral: Vec<(SelfAttnBlock, CrossAttnBlock)>,
    trans_norm: LayerNorm,
    trans_linear: Linear,
    spatial: Vec<SelfAttnBlock>,
    final_norm: LayerNorm,
    head_linear: Option<Linear>,
    observer: Option<SpectralObserver>,
}

impl fmt::Debug for CarlModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CarlModel")
            .field("config", &self.config)
            .field("head", &self.head)
            .finish_non_exhaustive()
    }
}

impl CarlModel {
    /// Builds the layout and a freshly initialized parameter store.
    pub fn new<R: Rng + ?Sized>(config: CarlConfig, head: Head, rng: &mut R) -> Result<(CarlModel, ParamStore)> {
        config.validate()?;
        if let Head::Segmentation { classes } | Head::Classification { classes } = head {
            if classes < 2 {
                return Err(CarlError::config("a classification head needs at least two classes"));
            }
        }
        let c = &config;
        let (ds, dp) = (c.dim_spectral, c.dim_spatial);
        let encoder = WavelengthEncoder::new(ds, c.pe_sigma, c.pe_alpha, rng)?;
        let mut store = ParamStore::new();
        let p2 = c.patch_size * c.patch_size;
        let proj = Linear::new(&mut store, "patch_embed", p2, ds, 1.0 / (p2 as f64).sqrt(), rng);
        let reps = store.insert("spectral_reps", trunc_normal_tensor(&[c.num_reps, ds], c.rep_init_std, rng));
        let spectral = (0..c.spectral_modules)
            .map(|i| {
                let sa = SelfAttnBlock::new(&mut store, &format!("spectral.{i}.self"), ds, c.heads_spectral, c.mlp_ratio, c.init_std, rng);
                let ca = CrossAttnBlock::new(&mut store, &format!("spectral.{i}.cross"), ds, c.heads_spectral, c.mlp_ratio, c.init_std, rng);
                (sa, ca)
            })
            .collect();
        let trans_norm = LayerNorm::new(&mut store, "transition.norm", ds);
        let trans_linear = Linear::new(&mut store, "transition.linear", ds, dp, c.init_std, rng);
        let spatial = (0..c.spatial_depth)
            .map(|i| SelfAttnBlock::new(&mut store, &format!("spatial.{i}"), dp, c.heads_spatial, c.mlp_ratio, c.init_std, rng))
            .collect();
        let final_norm = LayerNorm::new(&mut store, "norm", dp);
        let head_linear = match head {
            Head::Segmentation { classes } | Head::Classification { classes } => {
                Some(Linear::new(&mut store, "head", dp, classes, c.init_std, rng))
            }
            Head::Identity => None,
        };
        let rep_pe = discrete_pe(c.num_reps, ds)?;
        let model = CarlModel {
            config,
            head,
            encoder,
            rep_pe,
            proj,
            reps,
            spectral,
            trans_norm,
            trans_linear,
            spatial,
            final_norm,
            head_linear,
            observer: None,
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &CarlConfig {
        &self.config
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn encoder(&self) -> &WavelengthEncoder {
        &self.encoder
    }

    pub fn set_encoder(&mut self, encoder: WavelengthEncoder) -> Result<()> {
        if encoder.dim() != self.config.dim_spectral {
            return Err(CarlError::validation(format!(
                "wavelength encoder has dimension {}, model expects {}",
                encoder.dim(),
                self.config.dim_spectral
            )));
        }
        self.encoder = encoder;
        Ok(())
    }

    pub fn set_observer(&mut self, observer: Option<SpectralObserver>) {
        self.observer = observer;
    }

    /// `[hw, C, P²]` patch pixels; patch `p` is row-major over the patch grid.
    pub fn patchify(&self, image: &SpectralImage) -> Result<Tensor> {
        let p = self.config.patch_size;
        let (h, w) = self.config.grid(image.height(), image.width())?;
        let c = image.channels();
        let (data, width) = (image.data(), image.width());
        let mut out = vec![0.0; h * w * c * p * p];
        for py in 0..h {
            for px in 0..w {
                let base = (py * w + px) * c * p * p;
                for dy in 0..p {
                    for dx in 0..p {
                        let pix = ((py * p + dy) * width + px * p + dx) * c;
                        for ch in 0..c {
                            out[base + ch * p * p + dy * p + dx] = data[pix + ch];
                        }
                    }
                }
            }
        }
        Tensor::new(vec![h * w, c, p * p], out)
    }

    /// Projected per-channel patch tokens `[B·hw, C, D]`. All images must
    /// share size and channel count.
    pub fn patch_tokens(&self, t: &mut Tape, ps: &ParamStore, images: &[&SpectralImage]) -> Result<Var> {
        let first = images.first().ok_or_else(|| CarlError::validation("empty image batch"))?;
        let mut parts = Vec::with_capacity(images.len());
        for img in images {
            if img.channels() != first.channels() || img.height() != first.height() || img.width() != first.width() {
                return Err(CarlError::validation("patch_tokens needs images of identical shape"));
            }
            parts.push(self.patchify(img)?);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let stacked = Tensor::stack(&refs)?;
        let s = stacked.shape();
        let merged = stacked.reshape(&[s[0] * s[1], s[2], s[3]])?;
        let x = t.constant(merged);
        self.proj.forward(t, ps, x)
    }

    /// Runs the spectral encoder on `tokens: [B·hw, C, D]`, where image `b`
    /// owns rows `b·hw .. (b+1)·hw` and has `wavelengths[b]`.
    /// Returns `(reps [B·hw, K, D], tokens [B·hw, C, D])`.
    pub fn spectral_forward(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        tokens: Var,
        wavelengths: &[&[f64]],
    ) -> Result<(Var, Var)> {
        let shape = t.shape(tokens).to_vec();
        let d = self.config.dim_spectral;
        if shape.len() != 3 || shape[2] != d {
            return Err(CarlError::Shape {
                op: "spectral_forward",
                lhs: shape,
                rhs: vec![d],
            });
        }
        let (g, c) = (shape[0], shape[1]);
        let b = wavelengths.len();
        if c == 0 || b == 0 || g % b != 0 {
            return Err(CarlError::validation(format!(
                "spectral_forward: {g} token groups cannot be split across {b} images"
            )));
        }
        if let Some(bad) = wavelengths.iter().find(|w| w.len() != c) {
            return Err(CarlError::validation(format!(
                "spectral_forward: {} wavelengths for {c} channels",
                bad.len()
            )));
        }
        if let Some(obs) = &self.observer {
            obs(&SpectralCall {
                grad_enabled: t.grad_enabled(),
                wavelengths: wavelengths.iter().map(|w| w.to_vec()).collect(),
                token_rows: g * c,
            });
        }
        let hw = g / b;
        let mut pe = Vec::with_capacity(b * c * d);
        for w in wavelengths {
            pe.extend_from_slice(self.encoder.encode(w)?.data());
        }
        let pe = t.constant(Tensor::new(vec![b, 1, c, d], pe)?);
        let x = t.reshape(tokens, &[b, hw, c, d])?;
        let x = t.add(x, pe)?;
        let mut x = t.reshape(x, &[g, c, d])?;

        let k = self.config.num_reps;
        let r = t.param(ps, self.reps);
        let rpe = t.constant(self.rep_pe.clone());
        let r = t.add(r, rpe)?;
        let base = t.constant(Tensor::zeros(&[g, k, d]));
        let mut reps = t.add(base, r)?;
        for (sa, ca) in &self.spectral {
            x = sa.forward(t, ps, x)?;
            reps = ca.forward(t, ps, reps, x)?;
        }
        Ok((reps, x))
    }

    /// Summation readout over the K representations: `[G, K, D] → [G, D]`.
    pub fn aggregate(&self, t: &mut Tape, reps: Var) -> Result<Var> {
        t.sum(reps, 1)
    }

    /// Layer norm and linear map into the spatial width, then the grid
    /// encoding: `[B, hw, D_spec] → [B, hw, D_spat]`.
    pub fn transition(&self, t: &mut Tape, ps: &ParamStore, agg: Var, grid: (usize, usize)) -> Result<Var> {
        let h = self.trans_norm.forward(t, ps, agg)?;
        let h = self.trans_linear.forward(t, ps, h)?;
        let pe = t.constant(grid_pe(grid.0, grid.1, self.config.dim_spatial)?);
        t.add(h, pe)
    }

    /// Spatial blocks and final norm over `[B, N, D_spat]`.
    pub fn spatial_forward(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let mut x = x;
        for block in &self.spatial {
            x = block.forward(t, ps, x)?;
        }
        self.final_norm.forward(t, ps, x)
    }

    /// Aggregated spectral features `[B, hw, D_spec]`. Images may have
    /// different channel counts; each count is encoded as its own group.
    pub fn spectral_features(&self, t: &mut Tape, ps: &ParamStore, images: &[&SpectralImage]) -> Result<Var> {
        let first = images.first().ok_or_else(|| CarlError::validation("empty image batch"))?;
        let (h, w) = self.config.grid(first.height(), first.width())?;
        if images.iter().any(|i| i.height() != first.height() || i.width() != first.width()) {
            return Err(CarlError::validation("all images in a batch must share height and width"));
        }
        let hw = h * w;
        let d = self.config.dim_spectral;
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for (i, img) in images.iter().enumerate() {
            match groups.iter_mut().find(|(c, _)| *c == img.channels()) {
                Some((_, members)) => members.push(i),
                None => groups.push((img.channels(), vec![i])),
            }
        }
        let mut outs = Vec::with_capacity(groups.len());
        let mut order = Vec::with_capacity(images.len());
        for (_, members) in &groups {
            let imgs: Vec<&SpectralImage> = members.iter().map(|&i| images[i]).collect();
            let waves: Vec<&[f64]> = imgs.iter().map(|i| i.wavelengths()).collect();
            let tokens = self.patch_tokens(t, ps, &imgs)?;
            let (reps, _) = self.spectral_forward(t, ps, tokens, &waves)?;
            outs.push(self.aggregate(t, reps)?);
            order.extend_from_slice(members);
        }
        let mut agg = if outs.len() == 1 { outs[0] } else { t.concat(&outs, 0)? };
        if order.iter().enumerate().any(|(pos, &i)| pos != i) {
            let mut where_is = vec![0; order.len()];
            for (pos, &i) in order.iter().enumerate() {
                where_is[i] = pos;
            }
            let rows: Vec<usize> = where_is.iter().flat_map(|&p| p * hw..(p + 1) * hw).collect();
            agg = t.index_select(agg, 0, &rows)?;
        }
        t.reshape(agg, &[images.len(), hw, d])
    }

    /// Spatial features after the final norm, `[B, hw, D_spat]`.
    pub fn encode(&self, t: &mut Tape, ps: &ParamStore, images: &[&SpectralImage]) -> Result<Var> {
        let agg = self.spectral_features(t, ps, images)?;
        let grid = self.config.grid(images[0].height(), images[0].width())?;
        let x = self.transition(t, ps, agg, grid)?;
        self.spatial_forward(t, ps, x)
    }

    fn head_linear(&self) -> Result<&Linear> {
        self.head_linear
            .as_ref()
            .ok_or_else(|| CarlError::config("model has no classification head"))
    }

    /// Per-patch logits `[B, hw, classes]` (segmentation head).
    pub fn patch_logits(&self, t: &mut Tape, ps: &ParamStore, images: &[&SpectralImage]) -> Result<Var> {
        if !matches!(self.head, Head::Segmentation { .. }) {
            return Err(CarlError::config("patch_logits needs a segmentation head"));
        }
        let feats = self.encode(t, ps, images)?;
        self.head_linear()?.forward(t, ps, feats)
    }

    /// Head output: pixel logits `[B, H·W, classes]` for segmentation,
    /// `[B, classes]` for classification, `[B, hw, D_spat]` for identity.
    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, images: &[&SpectralImage]) -> Result<Var> {
        match self.head {
            Head::Identity => self.encode(t, ps, images),
            Head::Classification { .. } => {
                let feats = self.encode(t, ps, images)?;
                let pooled = t.mean(feats, 1)?;
                self.head_linear()?.forward(t, ps, pooled)
            }
            Head::Segmentation { classes } => {
                let logits = self.patch_logits(t, ps, images)?;
                let (hgt, wid) = (images[0].height(), images[0].width());
                let (_, w) = self.config.grid(hgt, wid)?;
                let p = self.config.patch_size;
                let hw = t.shape(logits)[1];
                let b = images.len();
                let flat = t.reshape(logits, &[b * hw, classes])?;
                let rows: Vec<usize> = (0..b)
                    .flat_map(|i| (0..hgt * wid).map(move |pix| i * hw + (pix / wid / p) * w + (pix % wid) / p))
                    .collect();
                let up = t.index_select(flat, 0, &rows)?;
                t.reshape(up, &[b, hgt * wid, classes])
            }
        }
    }

    /// Mean pixel cross-entropy over labelled pixels (segmentation head).
    pub fn segmentation_loss(&self, t: &mut Tape, ps: &ParamStore, images: &[&SpectralImage]) -> Result<Var> {
        let Head::Segmentation { classes } = self.head else {
            return Err(CarlError::config("segmentation_loss needs a segmentation head"));
        };
        let labels = pixel_labels(images, classes)?;
        let logits = self.forward(t, ps, images)?;
        let n = labels.len();
        let flat = t.reshape(logits, &[n, classes])?;
        t.cross_entropy(flat, &labels)
    }
}

pub(crate) fn pixel_labels(images: &[&SpectralImage], classes: usize) -> Result<Vec<Option<usize>>> {
    let mut out = Vec::new();
    for img in images {
        let labels = img
            .labels()
            .ok_or_else(|| CarlError::validation("segmentation loss needs labelled images"))?;
        for &l in labels {
            if l == UNLABELED {
                out.push(None);
            } else if (l as usize) < classes {
                out.push(Some(l as usize));
            } else {
                return Err(CarlError::validation(format!("label {l} out of range for {classes} classes")));
            }
        }
    }
    Ok(out)
}

/// Keeps `max_c` channels drawn uniformly without replacement, in their
/// original order. Images with at most `max_c` channels are returned as-is.
pub fn channel_subsample<R: Rng + ?Sized>(image: &SpectralImage, max_c: usize, rng: &mut R) -> Result<SpectralImage> {
    if max_c == 0 {
        return Err(CarlError::validation("max_c must be at least 1"));
    }
    let c = image.channels();
    if c <= max_c {
        return Ok(image.clone());
    }
    let mut keep = rand::seq::index::sample(rng, c, max_c).into_vec();
    keep.sort_unstable();
    image.select_channels(&keep)
}

/// `n` channel indices at uniform stride over `0..c`, always including the
/// first channel.
pub fn uniform_stride_channels(c: usize, n: usize) -> Vec<usize> {
    if n >= c {
        return (0..c).collect();
    }
    (0..n).map(|i| i * c / n).collect()
}
