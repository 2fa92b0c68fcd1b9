use std::path::Path;

use crate::error::{CarlError, Result};

/// `counts[truth][pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(CarlError::validation("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix {
            classes: n,
            counts: rows.concat(),
        })
    }

    /// Counts pairs, skipping those whose truth is `None`.
    pub fn from_pairs(classes: usize, truth: &[Option<usize>], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(CarlError::validation("truth and prediction lengths differ"));
        }
        let mut m = ConfusionMatrix::new(classes);
        for (t, &p) in truth.iter().zip(pred) {
            if let Some(t) = *t {
                m.add(t, p)?;
            }
        }
        Ok(m)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(CarlError::validation(format!(
                "class pair ({truth}, {pred}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Fraction of samples on the diagonal.
pub fn overall_accuracy(conf: &ConfusionMatrix) -> Result<f64> {
    let total = conf.total();
    if total == 0 {
        return Err(CarlError::validation("overall accuracy of an empty confusion matrix"));
    }
    let diag: u64 = (0..conf.classes()).map(|c| conf.get(c, c)).sum();
    Ok(diag as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// `TP / (TP + FP + FN)` per class; absent classes are left out of the mean.
pub fn miou(conf: &ConfusionMatrix) -> Result<IouReport> {
    if conf.total() == 0 {
        return Err(CarlError::validation("mIoU of an empty confusion matrix"));
    }
    let n = conf.classes();
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let tp = conf.get(c, c);
            let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| conf.get(c, p)).sum();
            let fp: u64 = (0..n).filter(|&t| t != c).map(|t| conf.get(t, c)).sum();
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport { per_class, mean })
}

/// CSV with one row per class and a closing mean row.
pub fn write_metric_report(path: impl AsRef<Path>, conf: &ConfusionMatrix) -> Result<()> {
    let path = path.as_ref();
    let iou = miou(conf)?;
    let oa = overall_accuracy(conf)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["class", "iou", "support"])?;
    for (c, v) in iou.per_class.iter().enumerate() {
        let support: u64 = (0..conf.classes()).map(|p| conf.get(c, p)).sum();
        let iou = v.map_or(String::new(), |v| format!("{v:.6}"));
        w.write_record([c.to_string(), iou, support.to_string()])?;
    }
    w.write_record(["mean".to_string(), format!("{:.6}", iou.mean), conf.total().to_string()])?;
    w.write_record(["overall_accuracy".to_string(), format!("{oa:.6}"), conf.total().to_string()])?;
    w.flush().map_err(|e| CarlError::io(path, e))
}
