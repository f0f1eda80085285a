#![allow(dead_code)]

use vase_core::synth::GeneratedVideo;
use vase_models::config::{DataConfig, ModelConfig, RunConfig, WfcnConfig};
use vase_models::data::training_set;

/// Smallest configuration that still exercises every component.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig { base_width: 4, levels: 2, app_dim: 8, ref_size: 8, groups: 2, max_frames: 4, flow_scale: 2.0 },
        wfcn: WfcnConfig { width: 4, levels: 2 },
        data: DataConfig { height: 32, width: 32, frames: 3, clips: 4, seed: 5 },
        ..Default::default()
    };
    cfg.train.batch_size = 2;
    cfg.train.wfcn_batch_size = 2;
    cfg.jfsa.kmeans_restarts = 4;
    cfg.sample.ddim_steps = 3;
    cfg.validate().unwrap();
    cfg
}

pub fn tiny_data(cfg: &RunConfig) -> Vec<GeneratedVideo> {
    training_set(&cfg.data).unwrap()
}
