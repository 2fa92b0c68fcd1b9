//! Positional encodings: Fourier features over physical wavelength, and the
//! classic sinusoidal encoding over integer positions (1D and 2D grids).

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{CarlError, Result};
use crate::rng::normal;
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 1e-3;
pub const DEFAULT_SIGMA: f64 = 3.0;

/// Fourier-feature encoding of channel center wavelengths.
///
/// Row `i` of [`encode`](Self::encode) is
/// `[cos(2π·α·λᵢ·B), sin(2π·α·λᵢ·B)]` for a frequency vector `B` of length
/// `D/2` drawn once from `N(0, σ²)`. `B` is frozen: it is not a parameter
/// and is carried in checkpoints verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct WavelengthEncoder {
    freqs: Vec<f64>,
    alpha: f64,
    sigma: f64,
}

impl WavelengthEncoder {
    pub fn new<R: Rng + ?Sized>(dim: usize, sigma: f64, alpha: f64, rng: &mut R) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(CarlError::config(format!("wavelength encoding dimension {dim} must be even and positive")));
        }
        let freqs = (0..dim / 2).map(|_| normal(rng, 0.0, sigma)).collect();
        Ok(WavelengthEncoder { freqs, alpha, sigma })
    }

    pub fn from_parts(freqs: Vec<f64>, alpha: f64, sigma: f64) -> Result<Self> {
        if freqs.is_empty() || freqs.iter().any(|f| !f.is_finite()) {
            return Err(CarlError::validation("wavelength encoder frequencies must be finite and non-empty"));
        }
        Ok(WavelengthEncoder { freqs, alpha, sigma })
    }

    pub fn dim(&self) -> usize {
        2 * self.freqs.len()
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `[C, D]` encoding of wavelengths given in nanometers.
    pub fn encode(&self, wavelengths_nm: &[f64]) -> Result<Tensor> {
        if let Some((i, w)) = wavelengths_nm.iter().enumerate().find(|(_, w)| !w.is_finite()) {
            return Err(CarlError::validation(format!("wavelength {i} is not finite ({w})")));
        }
        if wavelengths_nm.is_empty() {
            return Err(CarlError::validation("no wavelengths to encode"));
        }
        let half = self.freqs.len();
        let mut data = Vec::with_capacity(wavelengths_nm.len() * 2 * half);
        for &lambda in wavelengths_nm {
            let pos = 2.0 * PI * self.alpha * lambda;
            data.extend(self.freqs.iter().map(|b| (pos * b).cos()));
            data.extend(self.freqs.iter().map(|b| (pos * b).sin()));
        }
        Tensor::new(vec![wavelengths_nm.len(), 2 * half], data)
    }
}

fn sinusoid(pos: f64, dim: usize, out: &mut Vec<f64>) {
    for i in 0..dim {
        let pair = (i / 2) as f64;
        let angle = pos / 10_000f64.powf(2.0 * pair / dim as f64);
        out.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
    }
}

/// `[n, dim]` sinusoidal encoding of positions `0..n`: even columns hold
/// `sin(pos / 10000^(2i/dim))`, odd columns the matching cosine.
pub fn discrete_pe(n: usize, dim: usize) -> Result<Tensor> {
    if n == 0 || dim == 0 {
        return Err(CarlError::validation("discrete_pe needs n >= 1 and dim >= 1"));
    }
    let mut data = Vec::with_capacity(n * dim);
    for p in 0..n {
        sinusoid(p as f64, dim, &mut data);
    }
    Tensor::new(vec![n, dim], data)
}

/// `[h·w, dim]` grid encoding in row-major cell order: the first `dim/2`
/// columns encode the row index and the last `dim/2` the column index.
pub fn grid_pe(h: usize, w: usize, dim: usize) -> Result<Tensor> {
    if h == 0 || w == 0 || !dim.is_multiple_of(2) || dim == 0 {
        return Err(CarlError::validation(format!("grid_pe({h}, {w}, {dim}): need positive sizes and even dim")));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(h * w * dim);
    for r in 0..h {
        for c in 0..w {
            sinusoid(r as f64, half, &mut data);
            sinusoid(c as f64, half, &mut data);
        }
    }
    Tensor::new(vec![h * w, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, Streams};

    fn encoder(dim: usize, seed: u64) -> WavelengthEncoder {
        let mut rng = Streams::new(seed).stream(Purpose::Init, 0);
        WavelengthEncoder::new(dim, DEFAULT_SIGMA, DEFAULT_ALPHA, &mut rng).unwrap()
    }

    #[test]
    fn zero_wavelength_is_ones_then_zeros() {
        let e = encoder(8, 1);
        let row = e.encode(&[0.0]).unwrap();
        assert_eq!(row.data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn thousand_nm_is_unit_position() {
        let e = encoder(8, 2);
        let row = e.encode(&[1000.0]).unwrap();
        for (i, b) in e.freqs().iter().enumerate() {
            assert!((row.data()[i] - (2.0 * PI * b).cos()).abs() < 1e-12);
            assert!((row.data()[4 + i] - (2.0 * PI * b).sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_scalar_loop() {
        let e = encoder(8, 3);
        let got = e.encode(&[500.0]).unwrap();
        for k in 0..8 {
            let b = e.freqs()[k % 4];
            let arg = 2.0 * std::f64::consts::PI * 1e-3 * 500.0 * b;
            let expected = if k < 4 { arg.cos() } else { arg.sin() };
            assert!((got.data()[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let e = encoder(8, 4);
        assert!(e.encode(&[f64::NAN]).is_err());
        assert!(e.encode(&[]).is_err());
        let mut rng = Streams::new(0).stream(Purpose::Init, 0);
        assert!(WavelengthEncoder::new(7, 3.0, 1e-3, &mut rng).is_err());
    }

    #[test]
    fn encode_is_bounded_and_permutation_equivariant() {
        let e = encoder(16, 5);
        let waves = [450.0, 512.5, 700.0, 880.0];
        let a = e.encode(&waves).unwrap();
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let perm = [2, 0, 3, 1];
        let permuted: Vec<f64> = perm.iter().map(|&i| waves[i]).collect();
        let b = e.encode(&permuted).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            assert_eq!(&b.data()[r * 16..(r + 1) * 16], &a.data()[src * 16..(src + 1) * 16]);
        }
        assert_eq!(e.encode(&waves).unwrap(), a);
    }

    #[test]
    fn discrete_pe_origin_and_injectivity() {
        let pe = discrete_pe(10_000, 16).unwrap();
        let row0 = &pe.data()[..16];
        for (i, v) in row0.iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        let mut rows: Vec<Vec<u64>> = pe.data().chunks(16).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 10_000);
    }

    #[test]
    fn grid_rows_and_columns() {
        let pe = grid_pe(2, 2, 8).unwrap();
        let cell = |r: usize, c: usize| &pe.data()[(r * 2 + c) * 8..(r * 2 + c + 1) * 8];
        // direct construction: row part from the 1D encoding of the row index
        let one_d = discrete_pe(2, 4).unwrap();
        assert_eq!(&cell(0, 1)[..4], &one_d.data()[..4]);
        assert_eq!(&cell(0, 0)[..4], &cell(0, 1)[..4]);
        assert_ne!(&cell(0, 0)[4..], &cell(0, 1)[4..]);
        assert_eq!(&cell(0, 1)[4..], &one_d.data()[4..8]);
    }
}
