use serde::{Deserialize, Serialize};

use crate::encoding::{DEFAULT_ALPHA, DEFAULT_SIGMA};
use crate::error::{CarlError, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Architecture hyperparameters. Serialized as a flat TOML table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarlConfig {
    pub patch_size: usize,
    pub dim_spectral: usize,
    pub dim_spatial: usize,
    pub num_reps: usize,
    pub spectral_modules: usize,
    pub spatial_depth: usize,
    pub heads_spectral: usize,
    pub heads_spatial: usize,
    pub mlp_ratio: usize,
    pub pe_sigma: f64,
    pub pe_alpha: f64,
    pub rep_init_std: f64,
    pub init_std: f64,
}

fn heads_for(dim: usize) -> usize {
    (dim / 64).max(1)
}

impl CarlConfig {
    fn with_dims(dim: usize, num_reps: usize, spectral_modules: usize, spatial_depth: usize) -> Self {
        CarlConfig {
            patch_size: 8,
            dim_spectral: dim,
            dim_spatial: dim,
            num_reps,
            spectral_modules,
            spatial_depth,
            heads_spectral: heads_for(dim),
            heads_spatial: heads_for(dim),
            mlp_ratio: 4,
            pe_sigma: DEFAULT_SIGMA,
            pe_alpha: DEFAULT_ALPHA,
            rep_init_std: 0.5,
            init_std: 0.02,
        }
    }

    /// Width 384, K=8, four spectral modules, eight spatial blocks.
    pub fn small() -> Self {
        Self::with_dims(384, 8, 4, 8)
    }

    /// `small` with the spatial encoder widened to 768.
    pub fn base() -> Self {
        let mut c = Self::small();
        c.dim_spatial = 768;
        c.heads_spatial = heads_for(768);
        c
    }

    /// Desk-scale default used by the CLI and the learning experiments.
    pub fn desk() -> Self {
        Self::with_dims(64, 8, 2, 4)
    }

    pub fn smoke() -> Self {
        Self::with_dims(64, 4, 2, 4)
    }

    /// Tiny configuration for gradient checks and oracle comparisons.
    pub fn toy() -> Self {
        let mut c = Self::with_dims(16, 2, 1, 1);
        c.heads_spectral = 2;
        c.heads_spatial = 2;
        c.init_std = 0.3;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "small" => Ok(Self::small()),
            "base" => Ok(Self::base()),
            "desk" => Ok(Self::desk()),
            "smoke" => Ok(Self::smoke()),
            "toy" => Ok(Self::toy()),
            other => Err(CarlError::config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CarlError::config(m));
        if self.patch_size == 0 || self.num_reps == 0 || self.mlp_ratio == 0 {
            return err("patch_size, num_reps and mlp_ratio must be positive".into());
        }
        for (name, dim, heads) in [
            ("dim_spectral", self.dim_spectral, self.heads_spectral),
            ("dim_spatial", self.dim_spatial, self.heads_spatial),
        ] {
            if dim == 0 || dim % 2 != 0 {
                return err(format!("{name} = {dim} must be even and positive"));
            }
            if heads == 0 || dim % heads != 0 {
                return err(format!("{name} = {dim} is not divisible by {heads} heads"));
            }
        }
        if !(self.pe_sigma > 0.0 && self.pe_alpha > 0.0 && self.rep_init_std > 0.0 && self.init_std > 0.0) {
            return err("pe_sigma, pe_alpha, rep_init_std and init_std must be positive".into());
        }
        Ok(())
    }

    /// Patch grid `(h, w)` for an `H × W` image.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.patch_size;
        if !height.is_multiple_of(p) || !width.is_multiple_of(p) {
            return Err(CarlError::config(format!(
                "image size {height}x{width} is not divisible by patch size {p}"
            )));
        }
        Ok((height / p, width / p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in ["small", "base", "desk", "smoke", "toy"] {
            let c = CarlConfig::preset(name).unwrap();
            c.validate().unwrap();
            let text = toml::to_string(&c).unwrap();
            let back: CarlConfig = toml::from_str(&text).unwrap();
            assert_eq!(back, c);
        }
        assert_eq!(CarlConfig::small().heads_spectral, 6);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut c = CarlConfig::desk();
        c.heads_spectral = 3;
        assert!(c.validate().is_err());
        assert!(CarlConfig::desk().grid(30, 32).is_err());
        assert_eq!(CarlConfig::desk().grid(32, 16).unwrap(), (4, 2));
    }
}
