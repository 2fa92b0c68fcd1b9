//! Synthetic multispectral cameras: Gaussian filter banks on a fixed
//! 100-point wavelength grid, rendered from hyperspectral cubes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{CarlError, Result};
use crate::io::SpectralImage;

pub const GRID_LEN: usize = 100;
pub const GRID_START_NM: f64 = 500.0;
pub const GRID_STEP_NM: f64 = 5.0;
pub const CENTER_LO_NM: f64 = 550.0;
pub const CENTER_HI_NM: f64 = 950.0;
pub const MIN_CHANNELS: usize = 10;
pub const MAX_CHANNELS: usize = 25;
pub const MIN_VARIANCE: f64 = 5.0;
pub const MAX_VARIANCE: f64 = 25.0;

const BANK_HEADER: &str = "carl-filter-bank 1";

/// 500, 505, …, 995 nm.
pub fn wavelength_grid() -> Vec<f64> {
    (0..GRID_LEN).map(|i| GRID_START_NM + GRID_STEP_NM * i as f64).collect()
}

pub fn is_canonical_grid(wavelengths: &[f64]) -> bool {
    wavelengths.len() == GRID_LEN && wavelengths.iter().zip(wavelength_grid()).all(|(a, b)| *a == b)
}

/// Unnormalized Gaussian response `exp(-(λ-μ)²/(2σ²))` on `grid`.
pub fn gaussian_response(mu: f64, variance: f64, grid: &[f64]) -> Result<Vec<f64>> {
    if !(variance > 0.0) || !mu.is_finite() {
        return Err(CarlError::validation(format!("filter needs finite center and positive variance, got μ={mu}, σ²={variance}")));
    }
    Ok(grid.iter().map(|l| (-(l - mu).powi(2) / (2.0 * variance)).exp()).collect())
}

/// Gaussian response scaled to unit L1 norm.
pub fn gaussian_filter_row(mu: f64, variance: f64, grid: &[f64]) -> Result<Vec<f64>> {
    let mut row = gaussian_response(mu, variance, grid)?;
    let total: f64 = row.iter().sum();
    if !(total > 0.0) {
        return Err(CarlError::Numeric(format!("filter at {mu} nm has no support on the grid")));
    }
    for v in &mut row {
        *v /= total;
    }
    Ok(row)
}

/// Greedy max-min selection of `c` grid points within `[lo, hi]`, starting
/// at the lowest admissible point; ties go to the smaller wavelength.
/// Centers are returned in selection order.
pub fn farthest_point_sample(c: usize, lo: f64, hi: f64, grid: &[f64]) -> Result<Vec<f64>> {
    let candidates: Vec<f64> = grid.iter().copied().filter(|&l| l >= lo && l <= hi).collect();
    if c == 0 || c > candidates.len() {
        return Err(CarlError::validation(format!(
            "cannot place {c} centers on {} grid points in [{lo}, {hi}]",
            candidates.len()
        )));
    }
    let mut chosen = vec![candidates[0]];
    let mut dist: Vec<f64> = candidates.iter().map(|&x| (x - candidates[0]).abs()).collect();
    while chosen.len() < c {
        let mut best = 0;
        for (i, &d) in dist.iter().enumerate() {
            if d > dist[best] {
                best = i;
            }
        }
        let pick = candidates[best];
        chosen.push(pick);
        for (d, &x) in dist.iter_mut().zip(&candidates) {
            *d = d.min((x - pick).abs());
        }
    }
    Ok(chosen)
}

/// `C × 100` L1-normalized Gaussian filter matrix with channels sorted by
/// center wavelength.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    means: Vec<f64>,
    variances: Vec<f64>,
    matrix: Vec<f64>,
}

impl FilterBank {
    /// Builds the rows from `(μ, σ²)` pairs. Centers must be distinct.
    pub fn from_params(means: &[f64], variances: &[f64]) -> Result<FilterBank> {
        if means.is_empty() || means.len() != variances.len() {
            return Err(CarlError::validation("filter bank needs one variance per center"));
        }
        let mut order: Vec<usize> = (0..means.len()).collect();
        order.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
        if order.windows(2).any(|w| means[w[0]] == means[w[1]]) {
            return Err(CarlError::validation("filter centers must be distinct"));
        }
        let grid = wavelength_grid();
        let mut matrix = Vec::with_capacity(means.len() * GRID_LEN);
        for &i in &order {
            matrix.extend(gaussian_filter_row(means[i], variances[i], &grid)?);
        }
        Ok(FilterBank {
            means: order.iter().map(|&i| means[i]).collect(),
            variances: order.iter().map(|&i| variances[i]).collect(),
            matrix,
        })
    }

    pub fn channels(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Row-major `C × 100`.
    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * GRID_LEN..(i + 1) * GRID_LEN]
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{BANK_HEADER}\n{}\n", self.channels());
        for (m, v) in self.means.iter().zip(&self.variances) {
            writeln!(s, "{m:.16e} {v:.16e}").unwrap();
        }
        for i in 0..self.channels() {
            let row: Vec<String> = self.row(i).iter().map(|x| format!("{x:.16e}")).collect();
            writeln!(s, "{}", row.join(" ")).unwrap();
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<FilterBank> {
        let bad = |reason: String| CarlError::Malformed {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != BANK_HEADER {
            return Err(CarlError::BadMagic {
                path: path.to_path_buf(),
                expected: BANK_HEADER.into(),
                found: header.chars().take(40).collect(),
            });
        }
        let c: usize = lines
            .next()
            .and_then(|l| l.trim().parse().ok())
            .filter(|&c| c > 0)
            .ok_or_else(|| bad("missing channel count".into()))?;
        let parse_row = |line: Option<&str>, n: usize, what: &str| -> Result<Vec<f64>> {
            let line = line.ok_or_else(|| bad(format!("missing {what}")))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| bad(format!("bad number `{t}` in {what}"))))
                .collect::<Result<_>>()?;
            if vals.len() != n || vals.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("{what} needs {n} finite values")));
            }
            Ok(vals)
        };
        let (mut means, mut variances) = (Vec::with_capacity(c), Vec::with_capacity(c));
        for i in 0..c {
            let mv = parse_row(lines.next(), 2, &format!("center line {i}"))?;
            means.push(mv[0]);
            variances.push(mv[1]);
        }
        let mut matrix = Vec::with_capacity(c * GRID_LEN);
        for i in 0..c {
            let row = parse_row(lines.next(), GRID_LEN, &format!("filter row {i}"))?;
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(bad(format!("filter row {i} is not a normalized nonnegative response")));
            }
            matrix.extend(row);
        }
        if means.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CarlError::NonMonotoneWavelengths {
                path: path.to_path_buf(),
                index: means.windows(2).position(|w| w[0] >= w[1]).unwrap() + 1,
            });
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(bad("trailing content".into()));
        }
        Ok(FilterBank {
            means,
            variances,
            matrix,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| CarlError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FilterBank> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CarlError::io(path, e))?;
        FilterBank::from_text(&text, path)
    }
}

/// Draws a camera: `C ~ U{10..25}`, centers by farthest point sampling on
/// `[550, 950]`, variances `~ U[5, 25]`.
pub fn sample_camera<R: Rng + ?Sized>(rng: &mut R) -> Result<FilterBank> {
    let c = rng.random_range(MIN_CHANNELS..=MAX_CHANNELS);
    let mut means = farthest_point_sample(c, CENTER_LO_NM, CENTER_HI_NM, &wavelength_grid())?;
    means.sort_by(f64::total_cmp);
    let variances: Vec<f64> = (0..c).map(|_| rng.random_range(MIN_VARIANCE..=MAX_VARIANCE)).collect();
    FilterBank::from_params(&means, &variances)
}

/// Renders a 100-channel image on the canonical grid through `bank`.
/// Labels and geometry are kept; wavelengths become the filter centers.
pub fn apply_filters(bank: &FilterBank, hsi: &SpectralImage) -> Result<SpectralImage> {
    if !is_canonical_grid(hsi.wavelengths()) {
        return Err(CarlError::validation("apply_filters needs a 100-channel image on the 500-995 nm grid"));
    }
    let c = bank.channels();
    let mut out = Vec::with_capacity(hsi.height() * hsi.width() * c);
    for px in hsi.data().chunks(GRID_LEN) {
        for i in 0..c {
            out.push(bank.row(i).iter().zip(px).map(|(f, p)| f * p).sum());
        }
    }
    SpectralImage::new(
        hsi.height(),
        hsi.width(),
        bank.means().to_vec(),
        out,
        hsi.labels().map(|l| l.to_vec()),
    )
}

/// Per-subject camera assignment for each variant: in variant `k`, subject
/// pair `j < k` (subjects `2j`, `2j+1`) is rendered by camera `j`; all other
/// subjects stay hyperspectral.
pub fn variant_plan(subjects: usize, variants: usize) -> Result<Vec<Vec<Option<usize>>>> {
    if subjects < 2 * variants {
        return Err(CarlError::validation(format!(
            "{variants} variants need at least {} training subjects, got {subjects}",
            2 * variants
        )));
    }
    Ok((0..=variants)
        .map(|k| (0..subjects).map(|s| (s < 2 * k).then_some(s / 2)).collect())
        .collect())
}

/// Variants `0..=banks.len()` of a subject-grouped training corpus.
pub fn build_variants(subjects: &[Vec<SpectralImage>], banks: &[FilterBank]) -> Result<Vec<Vec<Vec<SpectralImage>>>> {
    let plan = variant_plan(subjects.len(), banks.len())?;
    plan.iter()
        .map(|assignment| {
            subjects
                .iter()
                .zip(assignment)
                .map(|(images, cam)| match cam {
                    None => Ok(images.clone()),
                    Some(j) => images.iter().map(|img| apply_filters(&banks[*j], img)).collect(),
                })
                .collect()
        })
        .collect()
}
