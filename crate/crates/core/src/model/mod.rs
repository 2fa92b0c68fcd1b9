//! The CARL network: per-channel patch projection, spectral encoder with
//! cross-attention into K learned representations, summation readout,
//! spectral-to-spatial transition, spatial transformer and heads.

mod carl;
mod config;
mod flops;
pub mod layers;

pub(crate) use carl::pixel_labels;
pub use carl::{channel_subsample, uniform_stride_channels, CarlModel, Head, SpectralCall, SpectralObserver};
pub use config::{CarlConfig, CONFIG_SCHEMA_VERSION};
pub use flops::{flop_estimate, FlopBreakdown};
