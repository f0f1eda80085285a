//! Run configuration (TOML) shared by training, sampling and the CLI.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vase_core::jfsa::{JfsaConfig, KMeansOptions};
use vase_core::synth::SceneDistribution;

use crate::error::{Error, Result};

/// Diffusion UNet / ControlNet / appearance encoder / seg head architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels at full resolution; deeper levels use `2 × base_width`.
    pub base_width: usize,
    /// Resolution levels (each extra level halves H and W).
    pub levels: usize,
    pub app_dim: usize,
    /// Side of the square the reference crop is resized to.
    pub ref_size: usize,
    pub groups: usize,
    /// Longest clip the relative position table supports.
    pub max_frames: usize,
    /// Flow is divided by this before entering any network.
    pub flow_scale: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { base_width: 32, levels: 3, app_dim: 64, ref_size: 32, groups: 8, max_frames: 16, flow_scale: 2.0 }
    }
}

impl ModelConfig {
    pub fn widths(&self) -> Vec<usize> {
        (0..self.levels).map(|i| if i == 0 { self.base_width } else { 2 * self.base_width }).collect()
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.levels == 0 || self.app_dim == 0 || self.max_frames < 2 {
            return Err(Error::Config("model widths, levels, app_dim must be positive and max_frames ≥ 2".into()));
        }
        if self.ref_size < 8 || self.ref_size % 8 != 0 {
            return Err(Error::Config("model.ref_size must be a positive multiple of 8".into()));
        }
        if !(self.flow_scale > 0.0) {
            return Err(Error::Config("model.flow_scale must be positive".into()));
        }
        Ok(())
    }

    /// Frames must be divisible by this in both dimensions.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WfcnConfig {
    pub width: usize,
    /// Stride-2 downsampling stages.
    pub levels: usize,
}

impl Default for WfcnConfig {
    fn default() -> Self {
        Self { width: 16, levels: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JfsaSection {
    pub n_clusters_min: usize,
    pub n_clusters_max: usize,
    /// Negative means "derive from the flow statistics".
    pub lambda_bias: f64,
    pub p_augm: f64,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
}

impl Default for JfsaSection {
    fn default() -> Self {
        let d = JfsaConfig::default();
        Self {
            n_clusters_min: d.n_clusters_min,
            n_clusters_max: d.n_clusters_max,
            lambda_bias: -1.0,
            p_augm: d.p_augm,
            kmeans_restarts: d.kmeans.n_init,
            kmeans_max_iter: d.kmeans.max_iter,
        }
    }
}

impl JfsaSection {
    pub fn to_jfsa(&self) -> JfsaConfig {
        JfsaConfig {
            n_clusters_min: self.n_clusters_min,
            n_clusters_max: self.n_clusters_max,
            lambda_bias: (self.lambda_bias >= 0.0).then_some(self.lambda_bias),
            p_augm: self.p_augm,
            kmeans: KMeansOptions { n_init: self.kmeans_restarts, max_iter: self.kmeans_max_iter },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage3_steps: usize,
    pub wfcn_steps: usize,
    pub batch_size: usize,
    pub wfcn_batch_size: usize,
    pub lr: f32,
    pub wfcn_lr: f32,
    /// Weight of the segmentation loss.
    pub alpha: f32,
    pub p_image: f64,
    pub p_flow: f64,
    pub p_mask: f64,
    pub p_clean: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 20_000,
            stage2_steps: 8_000,
            stage3_steps: 4_000,
            wfcn_steps: 2_000,
            batch_size: 8,
            wfcn_batch_size: 4,
            lr: 1e-4,
            wfcn_lr: 1e-3,
            alpha: 0.05,
            p_image: 0.15,
            p_flow: 0.1,
            p_mask: 0.1,
            p_clean: 0.1,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_image", self.p_image), ("p_flow", self.p_flow), ("p_mask", self.p_mask), ("p_clean", self.p_clean)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("train.{name} = {p} is not a probability")));
            }
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("train.alpha must be ≥ 0".into()));
        }
        if self.batch_size == 0 || self.wfcn_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub s_image: f32,
    pub s_mask: f32,
    pub s_flow: f32,
    pub ddim_steps: usize,
    /// Pixels of dilation applied to `M_pred ∪ M_edit` before masking.
    pub dilate: usize,
    pub warp_threshold: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { s_image: 5.0, s_mask: 7.0, s_flow: 6.0, ddim_steps: 50, dilate: 2, warp_threshold: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub clips: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { height: 48, width: 64, frames: 8, clips: 500, seed: 0 }
    }
}

impl DataConfig {
    pub fn distribution(&self) -> SceneDistribution {
        SceneDistribution { height: self.height, width: self.width, frames: self.frames, ..SceneDistribution::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub wfcn: WfcnConfig,
    pub jfsa: JfsaSection,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.jfsa.to_jfsa().validate()?;
        let m = self.model.size_multiple().max(1 << self.wfcn.levels);
        if self.data.height % m != 0 || self.data.width % m != 0 {
            return Err(Error::Config(format!("frame size {}x{} must be divisible by {m}", self.data.height, self.data.width)));
        }
        if self.data.frames < 2 || self.data.frames > self.model.max_frames {
            return Err(Error::Config(format!("data.frames must be in [2, {}]", self.model.max_frames)));
        }
        Ok(())
    }

    /// Hash of everything that determines parameter shapes and meaning.
    pub fn architecture_hash(&self) -> String {
        let json = serde_json::to_string(&(&self.model, &self.wfcn)).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_parse() {
        let cfg = RunConfig::from_toml_str("[jfsa]\nn_clusters_min = 3\nn_clusters_max = 4\np_augm = 0.25\n").unwrap();
        assert_eq!(cfg.jfsa.n_clusters_min, 3);
        assert_eq!(cfg.jfsa.to_jfsa().p_augm, 0.25);
        assert!(RunConfig::from_toml_str("[jfsa]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[train]\np_flow = 2.0\n").is_err());
    }

    #[test]
    fn roundtrip_and_hash() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        let mut other = cfg.clone();
        other.model.base_width = 8;
        assert_ne!(other.architecture_hash(), cfg.architecture_hash());
        other = cfg.clone();
        other.train.lr = 0.5;
        assert_eq!(other.architecture_hash(), cfg.architecture_hash());
    }
}
