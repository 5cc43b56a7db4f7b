//! Differentiable Disney-BRDF shading over explicit material textures and a
//! lat-long environment map, with the losses, gradients and optimizer needed
//! to fit them to HDR images.

pub mod ablation;
pub mod adam;
pub mod brdf;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fit;
pub mod geom;
pub mod grad;
pub mod image;
pub mod lighting;
pub mod losses;
pub mod material;
pub mod params;
pub mod render;

pub use error::{Error, Result};
