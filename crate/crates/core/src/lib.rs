//! Metric height completion.
//!
//! Reconstructs complete digital surface models from an RGB image, a relative
//! monocular depth map and an incomplete metric height prior. The learned
//! path fits a spatially varying scale/shift field on dense ViT features at
//! test time; the baselines and the evaluation protocol live alongside it.

pub mod align;
pub mod degrade;
pub mod depth;
pub mod error;
pub mod eval;
pub mod features;
pub mod nn;
pub mod raster;
pub mod synth;
pub mod tta;

pub use error::{Error, Result};
