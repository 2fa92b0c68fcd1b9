//! Camera-agnostic spectral representation learning.
//!
//! The crate bundles a small reverse-mode differentiation engine, the CARL
//! spectral/spatial encoder, its joint spectral-spatial self-supervised
//! pre-training, a Gaussian-filter multispectral camera simulator, file
//! formats, evaluation probes, and the command-line front end.

pub mod camera;
pub mod datagen;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod optim;
pub mod rng;
pub mod run;
pub mod ssl;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod test_support;

pub use error::{CarlError, Result};
