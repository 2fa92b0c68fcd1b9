use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::masks::{sample_spatial_masks, sample_spectral_mask, MaskStyle, SpatialMaskPair, SpectralMask};
use super::predictor::Predictor;
use super::vicreg::{vicreg, VicregTerms};
use crate::error::{CarlError, Result};
use crate::io::{Checkpoint, SpectralImage};
use crate::model::{uniform_stride_channels, CarlConfig, CarlModel, Head, CONFIG_SCHEMA_VERSION};
use crate::optim::{cosine_lr, AdamW, AdamWConfig, DEFAULT_FINAL_LR, DEFAULT_LR, DEFAULT_WEIGHT_DECAY};
use crate::rng::{Purpose, Streams};
use crate::tensor::{ParamStore, Tape, Tensor};

pub const MOMENTUM_START: f64 = 0.996;
pub const MOMENTUM_END: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub predictor_depth: usize,
    pub mask_style: MaskStyle,
    /// Images with more channels are reduced to this many by uniform stride.
    pub max_channels: usize,
    pub spectral_loss: bool,
    pub spatial_loss: bool,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            total_steps: 1000,
            batch_size: 8,
            lr: DEFAULT_LR,
            final_lr: DEFAULT_FINAL_LR,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            predictor_depth: 3,
            mask_style: MaskStyle::Contiguous,
            max_channels: 64,
            spectral_loss: true,
            spatial_loss: true,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(CarlError::config("SSL batch size must be at least 2"));
        }
        if self.total_steps == 0 || self.predictor_depth == 0 || self.max_channels < 3 {
            return Err(CarlError::config("total_steps and predictor_depth must be positive, max_channels at least 3"));
        }
        if !(self.spectral_loss || self.spatial_loss) {
            return Err(CarlError::config("at least one of spectral_loss and spatial_loss must be enabled"));
        }
        Ok(())
    }
}

/// EMA momentum, linear from 0.996 at step 0 to 1.0 at `total`.
pub fn momentum_at(step: u64, total: u64) -> f64 {
    if step >= total {
        return MOMENTUM_END;
    }
    MOMENTUM_START + (MOMENTUM_END - MOMENTUM_START) * step as f64 / total as f64
}

/// `teacher ← m·teacher + (1−m)·student` for every tensor.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(CarlError::validation(format!("EMA momentum {m} outside [0, 1]")));
    }
    if !teacher.same_layout(student) {
        return Err(CarlError::validation("teacher and student parameter layouts differ"));
    }
    let ids: Vec<_> = teacher.ids().collect();
    for id in ids {
        let s = student.value(id).data();
        for (t, &x) in teacher.value_mut(id).data_mut().iter_mut().zip(s) {
            *t = m * *t + (1.0 - m) * x;
        }
    }
    Ok(())
}

const SSL_KIND: &str = "ssl";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SslMetadata {
    kind: String,
    schema_version: u32,
    model: CarlConfig,
    ssl: SslConfig,
}

#[derive(Debug, Clone)]
pub struct Predictors {
    pub spectral: Predictor,
    pub spatial: Predictor,
}

impl Predictors {
    pub fn new<R: Rng + ?Sized>(model: &CarlConfig, depth: usize, rng: &mut R) -> (Predictors, ParamStore) {
        let mut store = ParamStore::new();
        let spectral = Predictor::new(
            &mut store,
            "spectral_predictor",
            model.dim_spectral,
            depth,
            model.heads_spectral,
            model.mlp_ratio,
            model.init_std,
            rng,
        );
        let spatial = Predictor::new(
            &mut store,
            "spatial_predictor",
            model.dim_spatial,
            depth,
            model.heads_spatial,
            model.mlp_ratio,
            model.init_std,
            rng,
        );
        (Predictors { spectral, spatial }, store)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SslStepReport {
    pub step: u64,
    pub loss: f64,
    pub spectral: VicregTerms,
    pub spatial: VicregTerms,
    pub lr: f64,
    pub momentum: f64,
}

/// Masks drawn for one step.
#[derive(Debug, Clone)]
pub struct StepMasks {
    pub spectral: SpectralMask,
    pub spatial: SpatialMaskPair,
}

/// Student, EMA teacher, predictors and their optimizers.
#[derive(Debug, Clone)]
pub struct SslState {
    pub config: SslConfig,
    pub model: CarlModel,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub predictors: Predictors,
    pub predictor_params: ParamStore,
    pub student_opt: AdamW,
    pub predictor_opt: AdamW,
    pub streams: Streams,
    pub step: u64,
}

impl SslState {
    pub fn new(model_config: CarlConfig, config: SslConfig, seed: u64) -> Result<SslState> {
        config.validate()?;
        let streams = Streams::new(seed);
        let mut rng = streams.stream(Purpose::Init, 0);
        let (model, student) = CarlModel::new(model_config, Head::Identity, &mut rng)?;
        let (predictors, predictor_params) = Predictors::new(model.config(), config.predictor_depth, &mut rng);
        let adam = AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        };
        Ok(SslState {
            student_opt: AdamW::new(&student, adam),
            predictor_opt: AdamW::new(&predictor_params, adam),
            teacher: student.clone(),
            config,
            model,
            student,
            predictors,
            predictor_params,
            streams,
            step: 0,
        })
    }

    /// Uniform-stride reduction of channel-rich images to `max_channels`.
    pub fn prepare(&self, image: &SpectralImage) -> Result<SpectralImage> {
        if image.channels() <= self.config.max_channels {
            return Ok(image.clone());
        }
        image.select_channels(&uniform_stride_channels(image.channels(), self.config.max_channels))
    }

    pub fn sample_masks(&self, channels: usize, grid: (usize, usize)) -> Result<StepMasks> {
        let mut rng = self.streams.stream(Purpose::Masks, self.step);
        Ok(StepMasks {
            spectral: sample_spectral_mask(channels, self.config.mask_style, &mut rng)?,
            spatial: sample_spatial_masks(grid.0, grid.1, &mut rng)?,
        })
    }

    /// One joint spectral-spatial update on a batch of images that share
    /// size and channel count.
    pub fn train_step(&mut self, batch: &[&SpectralImage]) -> Result<SslStepReport> {
        let prepared: Vec<SpectralImage> = batch.iter().map(|i| self.prepare(i)).collect::<Result<_>>()?;
        let images: Vec<&SpectralImage> = prepared.iter().collect();
        let masks = {
            let first = images.first().ok_or_else(|| CarlError::validation("empty SSL batch"))?;
            let grid = self.model.config().grid(first.height(), first.width())?;
            self.sample_masks(first.channels(), grid)?
        };
        self.step_with_masks(&images, &masks)
    }

    pub fn step_with_masks(&mut self, images: &[&SpectralImage], masks: &StepMasks) -> Result<SslStepReport> {
        let b = images.len();
        if b < 2 {
            return Err(CarlError::validation("SSL needs a batch of at least two images"));
        }
        let first = images[0];
        let c = first.channels();
        if images.iter().any(|i| i.channels() != c || i.height() != first.height() || i.width() != first.width()) {
            return Err(CarlError::validation("SSL batches must share image size and channel count"));
        }
        if masks.spectral.channels() != c {
            return Err(CarlError::validation("spectral mask was drawn for another channel count"));
        }
        let grid = self.model.config().grid(first.height(), first.width())?;
        if masks.spatial.grid != grid {
            return Err(CarlError::validation("spatial masks were drawn for another grid"));
        }
        let (h, w) = grid;
        let hw = h * w;
        let model = &self.model;
        let cfg = model.config();
        let masked = masks.spectral.masked();
        let visible = masks.spectral.visible();
        let waves: Vec<&[f64]> = images.iter().map(|i| i.wavelengths()).collect();
        let pick = |idx: &[usize]| -> Vec<Vec<f64>> { waves.iter().map(|w| idx.iter().map(|&i| w[i]).collect()).collect() };
        let masked_waves = pick(masked);
        let visible_waves = pick(&visible);
        let t1 = masks.spatial.target_indices(0);
        let t2 = masks.spatial.target_indices(1);
        let context = masks.spatial.context();
        let targets_all: Vec<usize> = t1.iter().chain(&t2).copied().collect();

        // targets from the teacher on the full input
        let (spec_target, spat_target) = {
            let mut t = Tape::no_grad();
            let tokens = model.patch_tokens(&mut t, &self.teacher, images)?;
            let (reps, tokens) = model.spectral_forward(&mut t, &self.teacher, tokens, &waves)?;
            let spec = t.index_select(tokens, 1, masked)?;
            let agg = model.aggregate(&mut t, reps)?;
            let agg = t.reshape(agg, &[b, hw, cfg.dim_spectral])?;
            let x = model.transition(&mut t, &self.teacher, agg, grid)?;
            let feats = model.spatial_forward(&mut t, &self.teacher, x)?;
            let spat = t.index_select(feats, 1, &targets_all)?;
            (t.value(spec).clone(), t.value(spat).clone())
        };

        let mut t = Tape::new();
        let st = &self.student;
        let pp = &self.predictor_params;
        let tokens = model.patch_tokens(&mut t, st, images)?;
        let tokens = t.index_select(tokens, 1, &visible)?;
        let vw: Vec<&[f64]> = visible_waves.iter().map(|w| w.as_slice()).collect();
        let (reps, _) = model.spectral_forward(&mut t, st, tokens, &vw)?;
        let mw: Vec<&[f64]> = masked_waves.iter().map(|w| w.as_slice()).collect();
        let spec_pred = self.predictors.spectral.predict_spectral(&mut t, pp, reps, &mw, model.encoder())?;
        let spec_loss = vicreg(&mut t, spec_pred, &spec_target)?;

        let agg = model.aggregate(&mut t, reps)?;
        let agg = t.reshape(agg, &[b, hw, cfg.dim_spectral])?;
        let x = model.transition(&mut t, st, agg, grid)?;
        let x = t.index_select(x, 1, &context)?;
        let ctx = model.spatial_forward(&mut t, st, x)?;
        let p1 = self.predictors.spatial.predict_spatial(&mut t, pp, ctx, grid, &context, &t1)?;
        let p2 = self.predictors.spatial.predict_spatial(&mut t, pp, ctx, grid, &context, &t2)?;
        let spat_pred = t.concat(&[p1, p2], 1)?;
        let spat_loss = vicreg(&mut t, spat_pred, &spat_target)?;

        let loss = match (self.config.spectral_loss, self.config.spatial_loss) {
            (true, true) => t.add(spec_loss.total, spat_loss.total)?,
            (true, false) => spec_loss.total,
            _ => spat_loss.total,
        };
        let loss_value = t.value(loss).item();
        let spectral = spec_loss.values(&t);
        let spatial = spat_loss.values(&t);
        if !loss_value.is_finite() {
            return Err(CarlError::Numeric(format!(
                "non-finite SSL loss at step {}: spectral {spectral:?}, spatial {spatial:?}",
                self.step
            )));
        }
        let grads = t.backward(loss)?;
        self.student.zero_grad();
        self.predictor_params.zero_grad();
        grads.accumulate_into(&mut self.student);
        grads.accumulate_into(&mut self.predictor_params);

        let lr = cosine_lr(self.step, self.config.total_steps, self.config.lr, self.config.final_lr);
        self.student_opt.step(&mut self.student, lr);
        self.predictor_opt.step(&mut self.predictor_params, lr);
        // the last scheduled step uses momentum 1.0
        let momentum = momentum_at(self.step, self.config.total_steps.saturating_sub(1).max(1));
        ema_update(&mut self.teacher, &self.student, momentum)?;
        let report = SslStepReport {
            step: self.step,
            loss: loss_value,
            spectral,
            spatial,
            lr,
            momentum,
        };
        self.step += 1;
        Ok(report)
    }

    /// Everything needed to continue training bit-for-bit: weights of
    /// student, teacher and predictors, both optimizers, the wavelength
    /// frequencies, the seed and the step counter.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = SslMetadata {
            kind: SSL_KIND.into(),
            schema_version: CONFIG_SCHEMA_VERSION,
            model: self.model.config().clone(),
            ssl: self.config.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| CarlError::config(e.to_string()))?;
        let mut ck = Checkpoint::new(text, self.step, self.streams.seed());
        ck.push_encoder("encoder/freqs", self.model.encoder());
        ck.push_store("student", &self.student);
        ck.push_store("teacher", &self.teacher);
        ck.push_store("predictors", &self.predictor_params);
        ck.push_optimizer("adam.student", &self.student, &self.student_opt);
        ck.push_optimizer("adam.predictors", &self.predictor_params, &self.predictor_opt);
        Ok(ck)
    }

    /// Rebuilds a state from the configuration recorded in `ck`.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<SslState> {
        let meta: SslMetadata = toml::from_str(&ck.metadata).map_err(|e| CarlError::config(format!("checkpoint metadata: {e}")))?;
        if meta.kind != SSL_KIND || meta.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CarlError::config(format!(
                "checkpoint holds {:?} schema {}, expected {SSL_KIND:?} schema {CONFIG_SCHEMA_VERSION}",
                meta.kind, meta.schema_version
            )));
        }
        let mut state = SslState::new(meta.model, meta.ssl, ck.seed)?;
        state.restore(ck)?;
        Ok(state)
    }

    /// Loads tensors into this state's layout; every name must be present
    /// with the shape this configuration expects.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let encoder = ck.load_encoder("encoder/freqs", self.model.encoder())?;
        ck.load_store("student", &mut self.student)?;
        ck.load_store("teacher", &mut self.teacher)?;
        ck.load_store("predictors", &mut self.predictor_params)?;
        ck.load_optimizer("adam.student", &self.student, &mut self.student_opt)?;
        ck.load_optimizer("adam.predictors", &self.predictor_params, &mut self.predictor_opt)?;
        self.model.set_encoder(encoder)?;
        self.streams = Streams::new(ck.seed);
        self.step = ck.step;
        Ok(())
    }

    /// Picks the batch for the current step: a channel-count group drawn in
    /// proportion to its size, then distinct images within it.
    pub fn sample_batch<'a>(&self, corpus: &'a [SpectralImage]) -> Result<Vec<&'a SpectralImage>> {
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for (i, img) in corpus.iter().enumerate() {
            let c = img.channels().min(self.config.max_channels);
            match groups.iter_mut().find(|(k, _)| *k == c) {
                Some((_, m)) => m.push(i),
                None => groups.push((c, vec![i])),
            }
        }
        groups.retain(|(_, m)| m.len() >= 2);
        let total: usize = groups.iter().map(|(_, m)| m.len()).sum();
        if total == 0 {
            return Err(CarlError::validation("corpus has no channel-count group with two or more images"));
        }
        let mut rng = self.streams.stream(Purpose::Data, self.step);
        let mut pick = rng.random_range(0..total);
        let members = groups
            .iter()
            .find_map(|(_, m)| {
                if pick < m.len() {
                    Some(m)
                } else {
                    pick -= m.len();
                    None
                }
            })
            .expect("pick lies within the total");
        let n = self.config.batch_size.min(members.len());
        Ok(sample(&mut rng, members.len(), n).into_iter().map(|i| &corpus[members[i]]).collect())
    }
}

/// Mean over feature dimensions of the standard deviation of aggregated
/// spectral representations across all patches of `images`.
pub fn spectral_rep_std(model: &CarlModel, params: &ParamStore, images: &[&SpectralImage]) -> Result<f64> {
    let mut t = Tape::no_grad();
    let mut rows: Vec<Tensor> = Vec::new();
    for img in images {
        let f = model.spectral_features(&mut t, params, &[img])?;
        rows.push(t.value(f).clone());
    }
    let d = model.config().dim_spectral;
    let all: Vec<f64> = rows.iter().flat_map(|r| r.data().iter().copied()).collect();
    let n = all.len() / d;
    if n < 2 {
        return Err(CarlError::validation("need at least two patches to measure spread"));
    }
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| all[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (all[i * d + j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        total += var.sqrt();
    }
    Ok(total / d as f64)
}
