//! Video, flow and mask types with file I/O, the synthetic sprite-video
//! generator, motion clustering augmentation, forward warping and metrics.

pub mod error;
pub mod io;
pub mod jfsa;
pub mod metrics;
pub mod synth;
pub mod types;
pub mod warp;

pub use error::{Error, Result};
pub use types::{bbox_of, edit_region, EditSample, FlowField, FlowSequence, Mask, MaskSequence, RegionSet, RgbImage, VideoClip};
