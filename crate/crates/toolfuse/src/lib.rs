//! Tool-fusion pipeline: rasterized tool outputs combined by a small
//! trainable CNN under knockout augmentation and perturbed tool selection,
//! plus the analysis routines built on top of it.

pub mod analysis;
pub mod color;
pub mod error;
pub mod knockout;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod seed;
pub mod selection;
pub mod synth;
pub mod tbm;
pub mod toolbox;
pub mod verify;

pub use error::{Error, Result};
