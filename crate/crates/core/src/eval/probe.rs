use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{overall_accuracy, ConfusionMatrix};
use crate::error::{CarlError, Result};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::rng::{Purpose, Streams};
use crate::tensor::{ParamStore, Tape, Tensor};

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[n, d] => Ok((n, d)),
        s => Err(CarlError::validation(format!("features must be [N, D], got {s:?}"))),
    }
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(CarlError::validation(format!("{} labels for {n} feature rows", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(CarlError::validation(format!("label {l} out of range for {classes} classes")));
    }
    Ok(())
}

fn unit_rows(t: &Tensor, d: usize) -> Vec<f64> {
    let mut out = t.data().to_vec();
    for r in out.chunks_mut(d) {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            r.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// Cosine k-nearest-neighbour labels for every row of `query`. Votes are
/// counted over the `k` most similar training rows; a tie goes to the tied
/// class whose best neighbour is nearest.
pub fn knn_predict(train: &Tensor, train_labels: &[usize], query: &Tensor, k: usize, classes: usize) -> Result<Vec<usize>> {
    let (n, d) = rows(train)?;
    let (_, dq) = rows(query)?;
    if d != dq {
        return Err(CarlError::validation(format!("feature widths differ: {d} vs {dq}")));
    }
    check_labels(train_labels, n, classes)?;
    if k == 0 || k > n {
        return Err(CarlError::validation(format!("k = {k} with {n} training samples")));
    }
    let tr = unit_rows(train, d);
    let q = unit_rows(query, d);
    Ok(q.par_chunks(d)
        .map(|qr| {
            let mut sims: Vec<(f64, usize)> = tr
                .chunks(d)
                .enumerate()
                .map(|(i, r)| (r.iter().zip(qr).map(|(a, b)| a * b).sum::<f64>(), i))
                .collect();
            // descending similarity, lower index first on exact ties
            let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            if k < n {
                sims.select_nth_unstable_by(k - 1, cmp);
                sims.truncate(k);
            }
            sims.sort_by(cmp);
            let mut votes = vec![0usize; classes];
            for &(_, i) in &sims {
                votes[train_labels[i]] += 1;
            }
            let top = *votes.iter().max().expect("classes > 0");
            sims.iter()
                .map(|&(_, i)| train_labels[i])
                .find(|&c| votes[c] == top)
                .expect("a top class has a neighbour")
        })
        .collect())
}

/// Overall accuracy of the cosine kNN classifier on `eval`.
pub fn knn_probe(
    train: &Tensor,
    train_labels: &[usize],
    eval: &Tensor,
    eval_labels: &[usize],
    k: usize,
    classes: usize,
) -> Result<f64> {
    let (m, _) = rows(eval)?;
    check_labels(eval_labels, m, classes)?;
    let pred = knn_predict(train, train_labels, eval, k, classes)?;
    let truth: Vec<Option<usize>> = eval_labels.iter().map(|&l| Some(l)).collect();
    overall_accuracy(&ConfusionMatrix::from_pairs(classes, &truth, &pred)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub final_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        LinearProbeConfig {
            epochs: 50,
            lr: 1e-3,
            final_lr: 0.0,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub weight: Tensor,
    pub bias: Tensor,
    pub final_loss: f64,
}

impl LinearProbe {
    pub fn predict(&self, feats: &Tensor) -> Result<Vec<usize>> {
        let (_, d) = rows(feats)?;
        if d != self.weight.shape()[0] {
            return Err(CarlError::validation(format!("probe expects width {}, got {d}", self.weight.shape()[0])));
        }
        let classes = self.weight.shape()[1];
        let w = self.weight.data();
        Ok(feats
            .data()
            .chunks(d)
            .map(|x| {
                let logits: Vec<f64> = (0..classes)
                    .map(|c| self.bias.data()[c] + x.iter().enumerate().map(|(j, v)| v * w[j * classes + c]).sum::<f64>())
                    .collect();
                (0..classes)
                    .max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap_or(Ordering::Equal).then(b.cmp(&a)))
                    .expect("classes > 0")
            })
            .collect())
    }
}

/// Fits a single linear layer with cross-entropy and Adam under a cosine
/// schedule. The features are never modified.
pub fn fit_linear_probe(feats: &Tensor, labels: &[usize], classes: usize, config: &LinearProbeConfig) -> Result<LinearProbe> {
    let (n, d) = rows(feats)?;
    check_labels(labels, n, classes)?;
    if n == 0 || labels.iter().all(|&l| l == labels[0]) {
        return Err(CarlError::validation("linear probe needs at least two distinct labels"));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(CarlError::config("linear probe epochs and batch_size must be positive"));
    }
    let mut store = ParamStore::new();
    let w = store.insert("weight", Tensor::zeros(&[d, classes]));
    let b = store.insert("bias", Tensor::zeros(&[classes]));
    let mut opt = AdamW::new(
        &store,
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
    );
    let per_epoch = n.div_ceil(config.batch_size);
    let total = (config.epochs * per_epoch) as u64;
    let streams = Streams::new(config.seed);
    let mut step = 0u64;
    let mut final_loss = f64::NAN;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut streams.stream(Purpose::Probe, epoch as u64));
        for chunk in order.chunks(config.batch_size) {
            let x: Vec<f64> = chunk.iter().flat_map(|&i| feats.data()[i * d..(i + 1) * d].iter().copied()).collect();
            let y: Vec<Option<usize>> = chunk.iter().map(|&i| Some(labels[i])).collect();
            let mut t = Tape::new();
            let xv = t.constant(Tensor::new(vec![chunk.len(), d], x)?);
            let (wv, bv) = (t.param(&store, w), t.param(&store, b));
            let logits = t.linear(xv, wv, bv)?;
            let loss = t.cross_entropy(logits, &y)?;
            final_loss = t.value(loss).item();
            let grads = t.backward(loss)?;
            store.zero_grad();
            grads.accumulate_into(&mut store);
            opt.step(&mut store, cosine_lr(step, total, config.lr, config.final_lr));
            step += 1;
        }
    }
    Ok(LinearProbe {
        weight: store.value(w).clone(),
        bias: store.value(b).clone(),
        final_loss,
    })
}

/// Trains on one split, reports overall accuracy on the other.
pub fn linear_probe(
    train: &Tensor,
    train_labels: &[usize],
    eval: &Tensor,
    eval_labels: &[usize],
    classes: usize,
    config: &LinearProbeConfig,
) -> Result<(f64, ConfusionMatrix)> {
    let (m, _) = rows(eval)?;
    check_labels(eval_labels, m, classes)?;
    let probe = fit_linear_probe(train, train_labels, classes, config)?;
    let pred = probe.predict(eval)?;
    let truth: Vec<Option<usize>> = eval_labels.iter().map(|&l| Some(l)).collect();
    let conf = ConfusionMatrix::from_pairs(classes, &truth, &pred)?;
    Ok((overall_accuracy(&conf)?, conf))
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::rng::normal;

    /// Two Gaussian blobs with unit variance whose means sit 3σ either side
    /// of the origin along the first axis.
    fn blobs(n: usize, d: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = Streams::new(seed).stream(Purpose::Probe, 99);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let data = Tensor::from_fn(&[n, d], |i| {
            let centre = if i % d == 0 { if labels[i / d] == 0 { -3.0 } else { 3.0 } } else { 0.0 };
            centre + normal(&mut rng, 0.0, 1.0)
        });
        (data, labels)
    }

    #[test]
    fn duplicate_point_with_k1_gets_its_label() {
        let train = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.2]).unwrap();
        let labels = [0, 1, 2];
        let q = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(knn_predict(&train, &labels, &q, 1, 3).unwrap(), vec![1]);
    }

    #[test]
    fn separated_blobs_are_classified() {
        let (tr, tl) = blobs(200, 4, 1);
        let (ev, el) = blobs(200, 4, 2);
        let oa = knn_probe(&tr, &tl, &ev, &el, 20, 2).unwrap();
        assert!(oa > 0.95, "{oa}");
    }

    #[test]
    fn full_k_votes_the_majority() {
        let mut rng = Streams::new(3).stream(Purpose::Probe, 0);
        let train = Tensor::from_fn(&[10, 3], |_| rng.random_range(-1.0..1.0));
        let labels = [0, 0, 0, 0, 0, 0, 1, 1, 1, 2];
        let q = Tensor::from_fn(&[5, 3], |_| rng.random_range(-1.0..1.0));
        assert_eq!(knn_predict(&train, &labels, &q, 10, 3).unwrap(), vec![0; 5]);
        assert!(knn_predict(&train, &labels, &q, 11, 3).is_err());
    }

    #[test]
    fn ties_go_to_the_nearest_neighbour() {
        // two neighbours, one per class: the closer one wins
        let train = Tensor::new(vec![3, 2], vec![1.0, 0.1, 1.0, -0.5, -1.0, 0.0]).unwrap();
        let q = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(knn_predict(&train, &[1, 0, 2], &q, 2, 3).unwrap(), vec![1]);
        assert_eq!(knn_predict(&train, &[0, 1, 2], &q, 2, 3).unwrap(), vec![0]);
    }

    #[test]
    fn one_hot_features_are_learned() {
        let labels: Vec<usize> = (0..80).map(|i| i % 4).collect();
        let feats = Tensor::from_fn(&[80, 4], |i| if i % 4 == labels[i / 4] { 1.0 } else { 0.0 });
        let before = feats.clone();
        let (oa, _) = linear_probe(&feats, &labels, &feats, &labels, 4, &LinearProbeConfig::default()).unwrap();
        assert_eq!(oa, 1.0);
        assert_eq!(feats, before);
    }

    #[test]
    fn random_features_give_chance_accuracy() {
        let mut rng = Streams::new(4).stream(Purpose::Probe, 0);
        let tl: Vec<usize> = (0..400).map(|i| i % 4).collect();
        let el: Vec<usize> = (0..2000).map(|i| i % 4).collect();
        let tr = Tensor::from_fn(&[400, 8], |_| normal(&mut rng, 0.0, 1.0));
        let ev = Tensor::from_fn(&[2000, 8], |_| normal(&mut rng, 0.0, 1.0));
        let cfg = LinearProbeConfig {
            epochs: 10,
            ..Default::default()
        };
        let (oa, _) = linear_probe(&tr, &tl, &ev, &el, 4, &cfg).unwrap();
        assert!((oa - 0.25).abs() < 0.05, "{oa}");
    }

    #[test]
    fn single_class_is_rejected() {
        let f = Tensor::ones(&[4, 2]);
        assert!(fit_linear_probe(&f, &[1, 1, 1, 1], 2, &LinearProbeConfig::default()).is_err());
    }
}
