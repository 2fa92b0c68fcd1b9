//! Joint spectral-spatial self-supervised pre-training: masking, VICReg,
//! mask-token predictors and the EMA teacher/student update.

mod masks;
mod predictor;
mod trainer;
mod vicreg;

pub use masks::{
    admissible_block_shapes, sample_spatial_masks, sample_spectral_mask, spectral_mask_sizes, Block, MaskStyle,
    SpatialMaskPair, SpectralMask, MSI_MAX_CHANNELS,
};
pub use predictor::Predictor;
pub use trainer::{
    ema_update, momentum_at, spectral_rep_std, Predictors, SslConfig, SslState, SslStepReport, StepMasks,
    MOMENTUM_END, MOMENTUM_START,
};
pub use vicreg::{vicreg, VicregTerms, VicregVars, COV_WEIGHT, VAR_EPS};

#[cfg(test)]
mod tests;
