//! Supervised segmentation training with random channel subsampling.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{CarlError, Result};
use crate::io::{Checkpoint, SpectralImage, UNLABELED};
use crate::model::{channel_subsample, pixel_labels, CarlConfig, CarlModel, Head, CONFIG_SCHEMA_VERSION};
use crate::optim::{cosine_lr, AdamW, AdamWConfig, DEFAULT_FINAL_LR, DEFAULT_LR, DEFAULT_WEIGHT_DECAY};
use crate::rng::{Purpose, Streams};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub classes: usize,
    pub lr: f64,
    pub final_lr: f64,
    pub weight_decay: f64,
    /// Images with more channels keep a random subset of this size each step.
    pub max_channels: usize,
    /// Adds an equally weighted soft Dice term to the cross-entropy.
    pub dice_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2000,
            batch_size: 8,
            classes: 4,
            lr: DEFAULT_LR,
            final_lr: DEFAULT_FINAL_LR,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            max_channels: 32,
            dice_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.batch_size == 0 || self.max_channels == 0 {
            return Err(CarlError::config("total_steps, batch_size and max_channels must be positive"));
        }
        if self.classes < 2 {
            return Err(CarlError::config("training needs at least two classes"));
        }
        if !(self.lr >= 0.0 && self.final_lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(CarlError::config("learning rates and weight decay must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainStepReport {
    pub step: u64,
    pub loss: f64,
    pub cross_entropy: f64,
    pub dice: f64,
    pub lr: f64,
}

const TRAIN_KIND: &str = "supervised";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainMetadata {
    kind: String,
    schema_version: u32,
    model: CarlConfig,
    train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: CarlModel,
    pub params: ParamStore,
    pub opt: AdamW,
    pub streams: Streams,
    pub step: u64,
}

impl TrainState {
    pub fn new(model_config: CarlConfig, config: TrainConfig, seed: u64) -> Result<TrainState> {
        config.validate()?;
        let streams = Streams::new(seed);
        let head = Head::Segmentation { classes: config.classes };
        let (model, params) = CarlModel::new(model_config, head, &mut streams.stream(Purpose::Init, 0))?;
        let opt = AdamW::new(
            &params,
            AdamWConfig {
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
        );
        Ok(TrainState {
            config,
            model,
            params,
            opt,
            streams,
            step: 0,
        })
    }

    /// Distinct images for the current step, drawn from the data stream.
    pub fn sample_batch<'a>(&self, corpus: &'a [SpectralImage]) -> Result<Vec<&'a SpectralImage>> {
        if corpus.is_empty() {
            return Err(CarlError::validation("empty training corpus"));
        }
        let mut rng = self.streams.stream(Purpose::Data, self.step);
        let n = self.config.batch_size.min(corpus.len());
        Ok(sample(&mut rng, corpus.len(), n).into_iter().map(|i| &corpus[i]).collect())
    }

    pub fn train_step(&mut self, batch: &[&SpectralImage]) -> Result<TrainStepReport> {
        if batch.is_empty() {
            return Err(CarlError::validation("empty training batch"));
        }
        // one channel subset per image, keyed by step so resumes replay it
        let mut rng = self.streams.stream(Purpose::Masks, self.step);
        let sub: Vec<SpectralImage> = batch
            .iter()
            .map(|img| channel_subsample(img, self.config.max_channels, &mut rng))
            .collect::<Result<_>>()?;
        let images: Vec<&SpectralImage> = sub.iter().collect();

        let mut t = Tape::new();
        let (loss, ce, dice) = self.loss(&mut t, &images)?;
        let loss_value = t.value(loss).item();
        if !loss_value.is_finite() {
            return Err(CarlError::Numeric(format!("non-finite training loss at step {}", self.step)));
        }
        let report = TrainStepReport {
            step: self.step,
            loss: loss_value,
            cross_entropy: t.value(ce).item(),
            dice: dice.map_or(0.0, |d| t.value(d).item()),
            lr: cosine_lr(self.step, self.config.total_steps, self.config.lr, self.config.final_lr),
        };
        let grads = t.backward(loss)?;
        self.params.zero_grad();
        grads.accumulate_into(&mut self.params);
        self.opt.step(&mut self.params, report.lr);
        self.step += 1;
        Ok(report)
    }

    fn loss(&self, t: &mut Tape, images: &[&SpectralImage]) -> Result<(Var, Var, Option<Var>)> {
        let classes = self.config.classes;
        let labels = pixel_labels(images, classes)?;
        let logits = self.model.forward(t, &self.params, images)?;
        let flat = t.reshape(logits, &[labels.len(), classes])?;
        let ce = t.cross_entropy(flat, &labels)?;
        if !self.config.dice_loss {
            return Ok((ce, ce, None));
        }
        let dice = soft_dice(t, logits, images, self.config.classes)?;
        Ok((t.add(ce, dice)?, ce, Some(dice)))
    }

    /// Mean cross-entropy over labelled pixels without updating anything.
    pub fn evaluate_loss(&self, images: &[&SpectralImage]) -> Result<f64> {
        let mut t = Tape::no_grad();
        let ce = self.model.segmentation_loss(&mut t, &self.params, images)?;
        Ok(t.value(ce).item())
    }

    /// Per-pixel argmax predictions of one image.
    pub fn predict(&self, image: &SpectralImage) -> Result<Vec<usize>> {
        predict_pixels(&self.model, &self.params, image)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = TrainMetadata {
            kind: TRAIN_KIND.into(),
            schema_version: CONFIG_SCHEMA_VERSION,
            model: self.model.config().clone(),
            train: self.config.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| CarlError::config(e.to_string()))?;
        let mut ck = Checkpoint::new(text, self.step, self.streams.seed());
        ck.push_encoder("encoder/freqs", self.model.encoder());
        ck.push_store("model", &self.params);
        ck.push_optimizer("adam.model", &self.params, &self.opt);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<TrainState> {
        let meta: TrainMetadata = toml::from_str(&ck.metadata).map_err(|e| CarlError::config(format!("checkpoint metadata: {e}")))?;
        if meta.kind != TRAIN_KIND || meta.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CarlError::config(format!(
                "checkpoint holds {:?} schema {}, expected {TRAIN_KIND:?} schema {CONFIG_SCHEMA_VERSION}",
                meta.kind, meta.schema_version
            )));
        }
        let mut state = TrainState::new(meta.model, meta.train, ck.seed)?;
        state.restore(ck)?;
        Ok(state)
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let encoder = ck.load_encoder("encoder/freqs", self.model.encoder())?;
        ck.load_store("model", &mut self.params)?;
        ck.load_optimizer("adam.model", &self.params, &mut self.opt)?;
        self.model.set_encoder(encoder)?;
        self.streams = Streams::new(ck.seed);
        self.step = ck.step;
        Ok(())
    }
}

pub fn predict_pixels(model: &CarlModel, params: &ParamStore, image: &SpectralImage) -> Result<Vec<usize>> {
    let mut t = Tape::no_grad();
    let logits = model.patch_logits(&mut t, params, &[image])?;
    let k = t.shape(logits)[2];
    let per_patch: Vec<usize> = t
        .value(logits)
        .data()
        .chunks(k)
        .map(|row| (0..k).fold(0, |best, c| if row[c] > row[best] { c } else { best }))
        .collect();
    let p = model.config().patch_size;
    let (_, gw) = model.config().grid(image.height(), image.width())?;
    let w = image.width();
    Ok((0..image.height() * w).map(|i| per_patch[(i / w / p) * gw + (i % w) / p]).collect())
}

/// `1 − mean_c 2·Σ p·y / (Σ p + Σ y)` over labelled pixels, with softmax
/// probabilities `p` and one-hot targets `y`.
fn soft_dice(t: &mut Tape, logits: Var, images: &[&SpectralImage], classes: usize) -> Result<Var> {
    let mut rows = Vec::new();
    let mut onehot = Vec::new();
    let mut offset = 0;
    for img in images {
        let labels = img.labels().ok_or_else(|| CarlError::validation("dice loss needs labelled images"))?;
        for (i, &l) in labels.iter().enumerate() {
            if l != UNLABELED {
                rows.push(offset + i);
                onehot.extend((0..classes).map(|c| if c == l as usize { 1.0 } else { 0.0 }));
            }
        }
        offset += labels.len();
    }
    if rows.is_empty() {
        return Err(CarlError::validation("dice loss over a batch with no labelled pixels"));
    }
    let n = rows.len();
    let flat = t.reshape(logits, &[offset, classes])?;
    let picked = t.index_select(flat, 0, &rows)?;
    let p = t.softmax(picked, 1)?;
    let y = t.constant(Tensor::new(vec![n, classes], onehot)?);
    let inter = t.mul(p, y)?;
    let inter = t.sum(inter, 0)?;
    let py = t.add(p, y)?;
    let denom = t.sum(py, 0)?;
    let denom = t.add_scalar(denom, 1e-6);
    let ratio = t.div(inter, denom)?;
    let mean = t.mean_all(ratio);
    let scaled = t.scale(mean, -2.0);
    Ok(t.add_scalar(scaled, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::sample_camera;
    use crate::io::{make_toy_scene, ToySceneConfig};

    fn state(seed: u64, dice: bool) -> TrainState {
        let cfg = TrainConfig {
            total_steps: 20,
            batch_size: 2,
            lr: 1e-3,
            dice_loss: dice,
            ..TrainConfig::default()
        };
        TrainState::new(CarlConfig::toy(), cfg, seed).unwrap()
    }

    fn scenes(n: usize) -> Vec<SpectralImage> {
        let s = Streams::new(11);
        let bank = sample_camera(&mut s.stream(Purpose::Cameras, 0)).unwrap();
        let cfg = ToySceneConfig {
            size: 16,
            ..ToySceneConfig::default()
        };
        (0..n)
            .map(|i| {
                let cam = (i % 2 == 0).then_some(&bank);
                make_toy_scene(&mut s.stream(Purpose::Scenes, i as u64), cam, &cfg).unwrap()
            })
            .collect()
    }

    #[test]
    fn mixed_channel_batches_train() {
        let data = scenes(4);
        let mut s = state(1, false);
        let batch: Vec<&SpectralImage> = data.iter().collect();
        let r = s.train_step(&batch).unwrap();
        assert!(r.loss.is_finite() && r.loss > 0.0);
        assert_eq!(r.dice, 0.0);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn dice_term_is_bounded_and_added() {
        let data = scenes(2);
        let mut s = state(2, true);
        let batch: Vec<&SpectralImage> = data.iter().collect();
        let r = s.train_step(&batch).unwrap();
        assert!(r.dice > 0.0 && r.dice < 1.0);
        assert!((r.loss - r.cross_entropy - r.dice).abs() < 1e-12);
    }

    #[test]
    fn dice_of_confident_correct_logits_is_near_zero() {
        let img = SpectralImage::new(1, 2, vec![500.0], vec![0.1, 0.2], Some(vec![0, 1])).unwrap();
        let mut t = Tape::no_grad();
        let logits = t.constant(Tensor::new(vec![1, 2, 2], vec![50.0, -50.0, -50.0, 50.0]).unwrap());
        let d = soft_dice(&mut t, logits, &[&img], 2).unwrap();
        assert!(t.value(d).item() < 1e-6);
    }

    #[test]
    fn resume_replays_the_same_steps() {
        let data = scenes(4);
        let run = |s: &mut TrainState, n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let b = s.sample_batch(&data).unwrap();
                    s.train_step(&b).unwrap().loss
                })
                .collect()
        };
        let mut a = state(3, false);
        let full = run(&mut a, 4);
        let mut b = state(3, false);
        let mut got = run(&mut b, 2);
        let ck = b.checkpoint().unwrap();
        let mut c = TrainState::from_checkpoint(&ck).unwrap();
        got.extend(run(&mut c, 2));
        assert_eq!(got, full);
    }

    #[test]
    fn predictions_cover_every_pixel() {
        let data = scenes(1);
        let s = state(4, false);
        let p = s.predict(&data[0]).unwrap();
        assert_eq!(p.len(), 256);
        assert!(p.iter().all(|&c| c < 4));
    }
}
