//! `SpectralImage` and its `CSP1` container.
//!
//! Layout, all little-endian:
//!
//! | bytes        | content                                 |
//! |--------------|-----------------------------------------|
//! | 4            | magic `CSP1`                            |
//! | 4            | u32 version (1)                         |
//! | 4 × 3        | u32 H, W, C                             |
//! | 1            | u8 has-label flag (0 or 1)              |
//! | 4·C          | f32 wavelengths in nm                   |
//! | 4·H·W·C      | f32 data, H-major then W then C         |
//! | 2·H·W        | u16 labels, only if the flag is set     |

use std::fs;
use std::path::Path;

use crate::error::{CarlError, Result};

pub const IMAGE_MAGIC: &[u8; 4] = b"CSP1";
pub const IMAGE_VERSION: u32 = 1;
pub const UNLABELED: u16 = 0xFFFF;

const HEADER_LEN: usize = 4 + 4 + 12 + 1;

/// An `H × W × C` reflectance cube with per-channel wavelengths.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralImage {
    height: usize,
    width: usize,
    wavelengths: Vec<f64>,
    data: Vec<f64>,
    labels: Option<Vec<u16>>,
}

impl SpectralImage {
    pub fn new(height: usize, width: usize, wavelengths: Vec<f64>, data: Vec<f64>, labels: Option<Vec<u16>>) -> Result<Self> {
        let c = wavelengths.len();
        if height == 0 || width == 0 || c == 0 {
            return Err(CarlError::validation(format!("image dimensions {height}x{width}x{c} must be positive")));
        }
        if data.len() != height * width * c {
            return Err(CarlError::validation(format!(
                "image data has {} values, expected {height}*{width}*{c}",
                data.len()
            )));
        }
        if let Some(i) = first_bad_wavelength(&wavelengths) {
            return Err(CarlError::validation(format!(
                "wavelengths must be finite, positive and strictly increasing (channel {i})"
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CarlError::validation(format!("non-finite image value at element {i}")));
        }
        if let Some(l) = &labels {
            if l.len() != height * width {
                return Err(CarlError::validation("label plane size does not match image"));
            }
        }
        Ok(SpectralImage {
            height,
            width,
            wavelengths,
            data,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let c = self.channels();
        let off = (y * self.width + x) * c;
        &self.data[off..off + c]
    }

    pub fn with_labels(mut self, labels: Option<Vec<u16>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.height * self.width {
                return Err(CarlError::validation("label plane size does not match image"));
            }
        }
        self.labels = labels;
        Ok(self)
    }

    /// Keeps the given channels (indices must be strictly increasing).
    pub fn select_channels(&self, indices: &[usize]) -> Result<SpectralImage> {
        let c = self.channels();
        if indices.is_empty() || indices.windows(2).any(|w| w[0] >= w[1]) || indices.iter().any(|&i| i >= c) {
            return Err(CarlError::validation("channel selection must be non-empty, increasing and in range"));
        }
        let mut data = Vec::with_capacity(self.height * self.width * indices.len());
        for px in self.data.chunks(c) {
            data.extend(indices.iter().map(|&i| px[i]));
        }
        Ok(SpectralImage {
            height: self.height,
            width: self.width,
            wavelengths: indices.iter().map(|&i| self.wavelengths[i]).collect(),
            data,
            labels: self.labels.clone(),
        })
    }

    /// Bytes of the `CSP1` encoding. Values are stored as f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.channels();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * c + 4 * self.data.len() + 2 * self.height * self.width);
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
        for d in [self.height, self.width, c] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(u8::from(self.labels.is_some()));
        for &w in &self.wavelengths {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for &l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<SpectralImage> {
        let truncated = |expected: usize| CarlError::Truncated {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        };
        if bytes.len() < 4 || &bytes[..4] != IMAGE_MAGIC {
            return Err(CarlError::BadMagic {
                path: path.to_path_buf(),
                expected: String::from_utf8_lossy(IMAGE_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(HEADER_LEN));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != IMAGE_VERSION {
            return Err(CarlError::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                supported: IMAGE_VERSION,
            });
        }
        let (h, w, c) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let flag = bytes[20];
        let malformed = |reason: String| CarlError::Malformed {
            path: path.to_path_buf(),
            reason,
        };
        if h == 0 || w == 0 || c == 0 {
            return Err(malformed(format!("zero dimension {h}x{w}x{c}")));
        }
        if flag > 1 {
            return Err(malformed(format!("label flag {flag}")));
        }
        let expected = HEADER_LEN + 4 * c + 4 * h * w * c + if flag == 1 { 2 * h * w } else { 0 };
        if bytes.len() < expected {
            return Err(truncated(expected));
        }
        if bytes.len() > expected {
            return Err(malformed(format!("{} trailing bytes", bytes.len() - expected)));
        }
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
        let wavelengths: Vec<f64> = (0..c).map(|i| f32_at(HEADER_LEN + 4 * i)).collect();
        let data_off = HEADER_LEN + 4 * c;
        let data: Vec<f64> = (0..h * w * c).map(|i| f32_at(data_off + 4 * i)).collect();
        if let Some(index) = wavelengths
            .iter()
            .chain(&data)
            .position(|v| !v.is_finite())
        {
            return Err(CarlError::NonFinite {
                path: path.to_path_buf(),
                index,
            });
        }
        if let Some(index) = first_bad_wavelength(&wavelengths) {
            return Err(CarlError::NonMonotoneWavelengths {
                path: path.to_path_buf(),
                index,
            });
        }
        let labels = (flag == 1).then(|| {
            let off = data_off + 4 * h * w * c;
            (0..h * w)
                .map(|i| u16::from_le_bytes([bytes[off + 2 * i], bytes[off + 2 * i + 1]]))
                .collect()
        });
        Ok(SpectralImage {
            height: h,
            width: w,
            wavelengths,
            data,
            labels,
        })
    }
}

fn first_bad_wavelength(w: &[f64]) -> Option<usize> {
    w.iter()
        .enumerate()
        .position(|(i, &v)| !v.is_finite() || v <= 0.0 || (i > 0 && v <= w[i - 1]))
}

pub fn write_image(path: impl AsRef<Path>, image: &SpectralImage) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CarlError::io(parent, e))?;
    }
    fs::write(path, image.to_bytes()).map_err(|e| CarlError::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<SpectralImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CarlError::io(path, e))?;
    SpectralImage::from_bytes(&bytes, path)
}
