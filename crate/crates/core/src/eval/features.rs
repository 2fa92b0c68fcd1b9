use serde::{Deserialize, Serialize};

use crate::error::{CarlError, Result};
use crate::io::{SpectralImage, UNLABELED};
use crate::model::CarlModel;
use crate::tensor::{ParamStore, Tape, Tensor};

/// Which frozen representation a probe reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLayer {
    /// Sum of the spectral representations, per patch.
    Spectral,
    /// Spatial encoder output after the final norm, per patch.
    #[default]
    Spatial,
}

impl std::str::FromStr for FeatureLayer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "spectral" => Ok(FeatureLayer::Spectral),
            "spatial" => Ok(FeatureLayer::Spatial),
            other => Err(format!("unknown feature layer {other:?} (spectral or spatial)")),
        }
    }
}

/// Per-patch features of every image stacked to `[Σ hw, D]`, in image order.
pub fn patch_features(model: &CarlModel, params: &ParamStore, images: &[&SpectralImage], layer: FeatureLayer) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut width = 0;
    for img in images {
        let mut t = Tape::no_grad();
        let v = match layer {
            FeatureLayer::Spectral => model.spectral_features(&mut t, params, &[img])?,
            FeatureLayer::Spatial => model.encode(&mut t, params, &[img])?,
        };
        let s = t.shape(v);
        rows += s[1];
        width = s[2];
        data.extend_from_slice(t.value(v).data());
    }
    if rows == 0 {
        return Err(CarlError::validation("no images to extract features from"));
    }
    Tensor::new(vec![rows, width], data)
}

/// Label of each `patch × patch` block in row-major grid order: the class
/// covering more than half of its pixels, otherwise `None`.
pub fn majority_patch_labels(image: &SpectralImage, patch: usize) -> Result<Vec<Option<usize>>> {
    let labels = image
        .labels()
        .ok_or_else(|| CarlError::validation("patch labels need a labelled image"))?;
    let (h, w) = (image.height(), image.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(CarlError::validation(format!("{h}x{w} image does not tile into {patch}-pixel patches")));
    }
    let mut out = Vec::with_capacity((h / patch) * (w / patch));
    for py in 0..h / patch {
        for px in 0..w / patch {
            let mut counts = std::collections::BTreeMap::new();
            for y in py * patch..(py + 1) * patch {
                for x in px * patch..(px + 1) * patch {
                    let l = labels[y * w + x];
                    if l != UNLABELED {
                        *counts.entry(l).or_insert(0usize) += 1;
                    }
                }
            }
            let best = counts.into_iter().find(|&(_, n)| 2 * n > patch * patch);
            out.push(best.map(|(l, _)| l as usize));
        }
    }
    Ok(out)
}

/// Features and labels of every patch with a majority label.
#[derive(Debug, Clone)]
pub struct LabelledPatches {
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// Index into the input image list, per row.
    pub image: Vec<usize>,
}

pub fn labelled_patches(
    model: &CarlModel,
    params: &ParamStore,
    images: &[&SpectralImage],
    layer: FeatureLayer,
) -> Result<LabelledPatches> {
    let feats = patch_features(model, params, images, layer)?;
    let d = feats.shape()[1];
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut image = Vec::new();
    let mut row = 0;
    for (i, img) in images.iter().enumerate() {
        for l in majority_patch_labels(img, model.config().patch_size)? {
            if let Some(l) = l {
                data.extend_from_slice(&feats.data()[row * d..(row + 1) * d]);
                labels.push(l);
                image.push(i);
            }
            row += 1;
        }
    }
    if labels.is_empty() {
        return Err(CarlError::validation("no patch has a majority label"));
    }
    Ok(LabelledPatches {
        features: Tensor::new(vec![labels.len(), d], data)?,
        labels,
        image,
    })
}
