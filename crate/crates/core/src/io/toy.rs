//! Synthetic labelled scenes for desk-scale experiments.
//!
//! A scene is a background class overlaid with axis-aligned rectangles whose
//! edges fall on a fixed cell lattice (the patch size by default, so every
//! patch is pure). Each class has a smooth reference reflectance on the
//! 100-point grid; pixels get independent log-normal multiplicative noise
//! per wavelength before rendering.

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::camera::{apply_filters, wavelength_grid, FilterBank};
use crate::error::{CarlError, Result};
use crate::io::image::SpectralImage;

/// Per-class reflectance as `base + Σ amp·exp(-(λ-center)²/(2·width²))`.
struct ClassSpectrum {
    base: f64,
    bumps: &'static [(f64, f64, f64)],
}

const REFERENCE: [ClassSpectrum; 8] = [
    ClassSpectrum { base: 0.05, bumps: &[(0.15, 550.0, 30.0), (0.5, 900.0, 120.0)] },
    ClassSpectrum { base: 0.4, bumps: &[(0.2, 700.0, 80.0)] },
    ClassSpectrum { base: 0.1, bumps: &[(0.35, 520.0, 60.0), (0.1, 850.0, 50.0)] },
    ClassSpectrum { base: 0.15, bumps: &[(0.45, 650.0, 40.0)] },
    ClassSpectrum { base: 0.6, bumps: &[(-0.3, 760.0, 50.0)] },
    ClassSpectrum { base: 0.2, bumps: &[(0.3, 800.0, 30.0), (0.3, 600.0, 30.0)] },
    ClassSpectrum { base: 0.3, bumps: &[(0.4, 980.0, 80.0)] },
    ClassSpectrum { base: 0.7, bumps: &[(-0.4, 560.0, 70.0)] },
];

pub const MAX_TOY_CLASSES: usize = REFERENCE.len();

/// Reference reflectance of every class on the canonical grid.
pub fn reference_spectra() -> Vec<Vec<f64>> {
    let grid = wavelength_grid();
    REFERENCE
        .iter()
        .map(|s| {
            grid.iter()
                .map(|&l| s.base + s.bumps.iter().map(|&(a, c, w)| a * (-(l - c).powi(2) / (2.0 * w * w)).exp()).sum::<f64>())
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySceneConfig {
    pub size: usize,
    pub classes: usize,
    /// Rectangle edges snap to multiples of this many pixels.
    pub cell: usize,
    pub max_rects: usize,
    /// Log-normal sigma of the per-pixel, per-wavelength multiplicative noise.
    pub noise_sigma: f64,
    /// Log-normal sigma of a per-rectangle gain applied to the whole spectrum.
    pub region_gain_sigma: f64,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        ToySceneConfig {
            size: 32,
            classes: 4,
            cell: 8,
            max_rects: 4,
            noise_sigma: 0.05,
            region_gain_sigma: 0.0,
        }
    }
}

impl ToySceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_TOY_CLASSES).contains(&self.classes) {
            return Err(CarlError::config(format!("toy scenes support 2 to {MAX_TOY_CLASSES} classes")));
        }
        if self.cell == 0 || self.size == 0 || !self.size.is_multiple_of(self.cell) {
            return Err(CarlError::config(format!("scene size {} is not a multiple of cell {}", self.size, self.cell)));
        }
        if !(self.noise_sigma >= 0.0 && self.region_gain_sigma >= 0.0) {
            return Err(CarlError::config("noise sigmas must be nonnegative"));
        }
        Ok(())
    }
}

/// Label plane plus a gain per pixel (constant within each rectangle).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub size: usize,
    pub labels: Vec<u16>,
    pub gains: Vec<f64>,
}

pub fn sample_layout<R: Rng + ?Sized>(config: &ToySceneConfig, rng: &mut R) -> Result<SceneLayout> {
    config.validate()?;
    let n = config.size;
    let cells = n / config.cell;
    let gain = |rng: &mut R| {
        if config.region_gain_sigma > 0.0 {
            LogNormal::new(0.0, config.region_gain_sigma).expect("valid sigma").sample(rng)
        } else {
            1.0
        }
    };
    let background = rng.random_range(0..config.classes) as u16;
    let g = gain(rng);
    let mut labels = vec![background; n * n];
    let mut gains = vec![g; n * n];
    let rects = rng.random_range(1..=config.max_rects.max(1));
    for _ in 0..rects {
        let class = rng.random_range(0..config.classes) as u16;
        let g = gain(rng);
        let (h, w) = (rng.random_range(1..=cells.div_ceil(2)), rng.random_range(1..=cells.div_ceil(2)));
        let (top, left) = (rng.random_range(0..=cells - h), rng.random_range(0..=cells - w));
        for y in top * config.cell..(top + h) * config.cell {
            for x in left * config.cell..(left + w) * config.cell {
                labels[y * n + x] = class;
                gains[y * n + x] = g;
            }
        }
    }
    Ok(SceneLayout { size: n, labels, gains })
}

/// 100-channel rendering of a layout on the canonical grid.
pub fn render_hsi<R: Rng + ?Sized>(layout: &SceneLayout, noise_sigma: f64, rng: &mut R) -> Result<SpectralImage> {
    let refs = reference_spectra();
    let noise = (noise_sigma > 0.0).then(|| LogNormal::new(0.0, noise_sigma).expect("valid sigma"));
    let grid = wavelength_grid();
    let mut data = Vec::with_capacity(layout.labels.len() * grid.len());
    for (&label, &gain) in layout.labels.iter().zip(&layout.gains) {
        let spectrum = refs
            .get(label as usize)
            .ok_or_else(|| CarlError::validation(format!("toy class {label} has no reference spectrum")))?;
        for &r in spectrum {
            let eps = noise.as_ref().map_or(1.0, |d| d.sample(rng));
            data.push(r * gain * eps);
        }
    }
    SpectralImage::new(layout.size, layout.size, grid, data, Some(layout.labels.clone()))
}

/// One labelled scene, kept hyperspectral or rendered through `camera`.
pub fn make_toy_scene<R: Rng + ?Sized>(rng: &mut R, camera: Option<&FilterBank>, config: &ToySceneConfig) -> Result<SpectralImage> {
    let layout = sample_layout(config, rng)?;
    let hsi = render_hsi(&layout, config.noise_sigma, rng)?;
    match camera {
        Some(bank) => apply_filters(bank, &hsi),
        None => Ok(hsi),
    }
}
