use serde::Serialize;

use super::config::CarlConfig;

/// Multiply-accumulate counts of one forward pass over a single image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopBreakdown {
    pub channels: usize,
    pub patches: usize,
    pub projection: u64,
    pub spectral_self_attn: u64,
    pub spectral_cross_attn: u64,
    pub transition: u64,
    pub spatial: u64,
    pub total: u64,
}

/// Analytic MAC counts for `channels` channels on a grid of `patches` patches.
///
/// Per spectral self-attention block: `hw·(2·C²·D + (4 + 2r)·C·D²)`.
/// Per cross-attention block: `hw·(2·C·K·D + 2·(C + K)·D² + 2r·K·D²)`.
/// Per spatial block: `2·N²·D + (4 + 2r)·N·D²` with `N = hw`.
pub fn flop_estimate(config: &CarlConfig, channels: usize, patches: usize) -> FlopBreakdown {
    let c = channels as u64;
    let hw = patches as u64;
    let d = config.dim_spectral as u64;
    let dp = config.dim_spatial as u64;
    let k = config.num_reps as u64;
    let r = config.mlp_ratio as u64;
    let l = config.spectral_modules as u64;
    let p2 = (config.patch_size * config.patch_size) as u64;

    let projection = hw * c * p2 * d;
    let spectral_self_attn = l * hw * (2 * c * c * d + (4 + 2 * r) * c * d * d);
    let spectral_cross_attn = l * hw * (2 * c * k * d + 2 * (c + k) * d * d + 2 * r * k * d * d);
    let transition = hw * d * dp;
    let spatial = config.spatial_depth as u64 * (2 * hw * hw * dp + (4 + 2 * r) * hw * dp * dp);
    FlopBreakdown {
        channels,
        patches,
        projection,
        spectral_self_attn,
        spectral_cross_attn,
        transition,
        spatial,
        total: projection + spectral_self_attn + spectral_cross_attn + transition + spatial,
    }
}
