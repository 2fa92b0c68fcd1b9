use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CarlError, Result};

/// Channel counts above this are treated as hyperspectral.
pub const MSI_MAX_CHANNELS: usize = 16;
const MAX_SPATIAL_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskStyle {
    /// One run of adjacent channels.
    #[default]
    Contiguous,
    /// Channels drawn without replacement anywhere in the spectrum.
    Scatter,
}

/// Masked channel indices, shared by every patch of every image in a step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpectralMask {
    channels: usize,
    masked: Vec<usize>,
}

impl SpectralMask {
    pub fn new(channels: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.is_empty() || masked.len() >= channels || masked.iter().any(|&m| m >= channels) {
            return Err(CarlError::validation("spectral mask must hide a nonempty proper subset of channels"));
        }
        Ok(SpectralMask { channels, masked })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn visible(&self) -> Vec<usize> {
        (0..self.channels).filter(|c| self.masked.binary_search(c).is_err()).collect()
    }
}

/// Admissible mask sizes for `c` channels.
pub fn spectral_mask_sizes(c: usize) -> Result<(usize, usize)> {
    if c < 3 {
        return Err(CarlError::validation(format!("spectral masking needs at least 3 channels, got {c}")));
    }
    if c > MSI_MAX_CHANNELS {
        Ok(((15 * c).div_ceil(100), 30 * c / 100))
    } else {
        Ok((2, 3.min(c - 1)))
    }
}

/// Contiguous masks are uniform over admissible `(start, length)` pairs;
/// scattered masks draw the length uniformly, then the channels.
pub fn sample_spectral_mask<R: Rng + ?Sized>(c: usize, style: MaskStyle, rng: &mut R) -> Result<SpectralMask> {
    let (lo, hi) = spectral_mask_sizes(c)?;
    let masked = match style {
        MaskStyle::Contiguous => {
            let pairs: usize = (lo..=hi).map(|len| c - len + 1).sum();
            let mut pick = rng.random_range(0..pairs);
            let mut chosen = None;
            for len in lo..=hi {
                let starts = c - len + 1;
                if pick < starts {
                    chosen = Some((pick, len));
                    break;
                }
                pick -= starts;
            }
            let (start, len) = chosen.expect("pick lies within the pair count");
            (start..start + len).collect()
        }
        MaskStyle::Scatter => {
            let len = rng.random_range(lo..=hi);
            sample(rng, c, len).into_vec()
        }
    };
    SpectralMask::new(c, masked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Block {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    /// Row-major patch indices on a grid of width `grid_w`.
    pub fn indices(&self, grid_w: usize) -> Vec<usize> {
        (self.top..self.top + self.height)
            .flat_map(|r| (self.left..self.left + self.width).map(move |c| r * grid_w + c))
            .collect()
    }
}

/// Two target rectangles on the patch grid; the context is everything else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialMaskPair {
    pub grid: (usize, usize),
    pub targets: [Block; 2],
}

impl SpatialMaskPair {
    pub fn target_indices(&self, i: usize) -> Vec<usize> {
        self.targets[i].indices(self.grid.1)
    }

    pub fn context(&self) -> Vec<usize> {
        let (h, w) = self.grid;
        let mut covered = vec![false; h * w];
        for b in &self.targets {
            for i in b.indices(w) {
                covered[i] = true;
            }
        }
        (0..h * w).filter(|&i| !covered[i]).collect()
    }
}

/// Rectangle shapes `(height, width)` with 30–50% of the grid area and
/// height/width ratio in `[0.75, 1.5]`.
pub fn admissible_block_shapes(h: usize, w: usize) -> Vec<(usize, usize)> {
    let n = h * w;
    let (lo, hi) = ((3 * n).div_ceil(10), n / 2);
    let mut shapes = Vec::new();
    for bh in 1..=h {
        for bw in 1..=w {
            let area = bh * bw;
            if area >= lo && area <= hi && 4 * bh >= 3 * bw && 2 * bh <= 3 * bw {
                shapes.push((bh, bw));
            }
        }
    }
    shapes
}

pub fn sample_spatial_masks<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Result<SpatialMaskPair> {
    if h * w < 8 {
        return Err(CarlError::validation(format!("patch grid {h}x{w} is too small for spatial masking")));
    }
    let shapes = admissible_block_shapes(h, w);
    if shapes.is_empty() {
        return Err(CarlError::validation(format!("no admissible mask block fits a {h}x{w} grid")));
    }
    let block = |rng: &mut R| {
        let (bh, bw) = shapes[rng.random_range(0..shapes.len())];
        Block {
            top: rng.random_range(0..=h - bh),
            left: rng.random_range(0..=w - bw),
            height: bh,
            width: bw,
        }
    };
    for _ in 0..MAX_SPATIAL_ATTEMPTS {
        let pair = SpatialMaskPair {
            grid: (h, w),
            targets: [block(rng), block(rng)],
        };
        if !pair.context().is_empty() {
            return Ok(pair);
        }
    }
    Err(CarlError::validation(format!("could not leave any context on a {h}x{w} grid")))
}
