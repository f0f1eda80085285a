//! Neural components of the video editor (denoising UNet with temporal
//! layers, control branch, appearance encoder, segmentation head, flow
//! completion network), their training stages and the guided sampler.

pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod sampler;
pub mod schedule;
pub mod trainer;
pub mod unet;
pub mod wfcn;

pub use config::RunConfig;
pub use error::{Error, Result};
