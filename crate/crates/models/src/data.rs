//! Synthetic datasets on disk and conversions between the value types and
//! the networks' `[N, C, H, W]` layouts (pixels rescaled to [−1, 1]).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vase_core::io;
use vase_core::synth::{generate, generate_random, GeneratedVideo, SceneDistribution, SceneSpec};
use vase_core::{FlowSequence, Mask, MaskSequence, RgbImage, VideoClip};

use crate::config::DataConfig;
use crate::error::{Error, Result};

/// Seed of the `index`-th training clip.
pub fn train_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64)
}

/// Seed of the `index`-th held-out clip; disjoint from the training seeds
/// for any realistic dataset size.
pub fn heldout_seed(base: u64, index: usize) -> u64 {
    train_seed(base, index).wrapping_add(1 << 40)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dir: String,
    pub seed: u64,
    pub spec: SceneSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub data: DataConfig,
    pub clips: Vec<ManifestEntry>,
}

/// Generate `count` clips with the given seed function.
pub fn generate_clips(dist: &SceneDistribution, count: usize, seed_of: impl Fn(usize) -> u64) -> Result<Vec<(u64, SceneSpec, GeneratedVideo)>> {
    (0..count)
        .map(|i| {
            let seed = seed_of(i);
            let (spec, gv) = generate_random(dist, seed)?;
            Ok((seed, spec, gv))
        })
        .collect()
}

pub fn training_set(cfg: &DataConfig) -> Result<Vec<GeneratedVideo>> {
    Ok(generate_clips(&cfg.distribution(), cfg.clips, |i| train_seed(cfg.seed, i))?.into_iter().map(|c| c.2).collect())
}

pub fn heldout_set(cfg: &DataConfig, count: usize) -> Result<Vec<GeneratedVideo>> {
    Ok(generate_clips(&cfg.distribution(), count, |i| heldout_seed(cfg.seed, i))?.into_iter().map(|c| c.2).collect())
}

/// Write clips as `clip_NNNNN/{frames,masks,flow}` plus `manifest.json`.
pub fn write_dataset(dir: &Path, cfg: &DataConfig, clips: &[(u64, SceneSpec, GeneratedVideo)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(clips.len());
    for (i, (seed, spec, gv)) in clips.iter().enumerate() {
        let name = format!("clip_{i:05}");
        let root = dir.join(&name);
        io::write_clip(&root.join("frames"), &gv.clip)?;
        io::write_masks(&root.join("masks"), &gv.masks)?;
        io::write_flow_dir(&root.join("flow"), &gv.flow)?;
        entries.push(ManifestEntry { dir: name, seed: *seed, spec: spec.clone() });
    }
    let manifest = Manifest { data: cfg.clone(), clips: entries };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let s = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Read every clip listed in the manifest (frames are 8-bit quantised).
pub fn read_dataset(dir: &Path) -> Result<Vec<GeneratedVideo>> {
    let manifest = read_manifest(dir)?;
    if manifest.clips.is_empty() {
        return Err(Error::EmptyDataset);
    }
    manifest
        .clips
        .iter()
        .map(|e| {
            let root = dir.join(&e.dir);
            let clip = io::read_clip(&root.join("frames"))?;
            let masks = io::read_masks(&root.join("masks"))?;
            let flow = io::read_flow_dir(&root.join("flow"))?;
            flow.check_pairs_with(clip.frames(), clip.height(), clip.width())?;
            let poses = generate(&e.spec, e.seed).map(|g| g.poses).unwrap_or_default();
            Ok(GeneratedVideo { clip, masks, flow, poses })
        })
        .collect()
}

/// `[T, 3, H, W]` in [−1, 1].
pub fn video_to_planes(clip: &VideoClip) -> Vec<f32> {
    let (t, h, w) = (clip.frames(), clip.height(), clip.width());
    let hw = h * w;
    let mut out = vec![0f32; t * 3 * hw];
    for f in 0..t {
        let src = clip.frame(f);
        for p in 0..hw {
            for c in 0..3 {
                out[(f * 3 + c) * hw + p] = 2.0 * src[p * 3 + c] - 1.0;
            }
        }
    }
    out
}

/// Inverse of [`video_to_planes`], clamping to [0, 1].
pub fn planes_to_video(planes: &[f32], frames: usize, height: usize, width: usize) -> Result<VideoClip> {
    let hw = height * width;
    let mut data = vec![0f32; frames * hw * 3];
    for f in 0..frames {
        for p in 0..hw {
            for c in 0..3 {
                data[(f * hw + p) * 3 + c] = ((planes[(f * 3 + c) * hw + p] + 1.0) * 0.5).clamp(0.0, 1.0);
            }
        }
    }
    Ok(VideoClip::new_unchecked_len(frames, height, width, data)?)
}

/// `[T, 1, H, W]` of 0/1.
pub fn masks_to_planes(masks: &MaskSequence) -> Vec<f32> {
    masks.data().iter().map(|&v| v as f32).collect()
}

/// Masked frames in [−1, 1] with zeros (not −1) inside the box.
pub fn masked_planes(clip: &VideoClip, bbox: &MaskSequence) -> Vec<f32> {
    let mut out = video_to_planes(clip);
    let hw = clip.height() * clip.width();
    for f in 0..clip.frames() {
        let m = bbox.frame_slice(f);
        for c in 0..3 {
            for p in 0..hw {
                if m[p] == 1 {
                    out[(f * 3 + c) * hw + p] = 0.0;
                }
            }
        }
    }
    out
}

/// Reference crop resized to `size × size`, `[3, size, size]` in [−1, 1].
pub fn ref_planes(img: &RgbImage, size: usize) -> Vec<f32> {
    let r = img.resize(size, size);
    let n = size * size;
    let mut out = vec![0f32; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            out[c * n + p] = 2.0 * r.data[p * 3 + c] - 1.0;
        }
    }
    out
}

/// Flow as `[T−1, 2, H, W]` divided by `scale`.
pub fn flow_planes(flow: &FlowSequence, scale: f32) -> Vec<f32> {
    let hw = flow.height() * flow.width();
    let mut out = vec![0f32; flow.len() * 2 * hw];
    for t in 0..flow.len() {
        let f = flow.field_slice(t);
        for p in 0..hw {
            out[(t * 2) * hw + p] = f[2 * p] / scale;
            out[(t * 2 + 1) * hw + p] = f[2 * p + 1] / scale;
        }
    }
    out
}

/// Control hint `[T, 3, H, W]`: scaled flow padded with a zero field at the
/// end, then the structure mask repeated over all frames. `None` slots are
/// the null (all-zero) conditions.
pub fn hint_planes(flow: Option<&FlowSequence>, mask: Option<&Mask>, frames: usize, height: usize, width: usize, scale: f32) -> Vec<f32> {
    let hw = height * width;
    let mut out = vec![0f32; frames * 3 * hw];
    if let Some(flow) = flow {
        let fp = flow_planes(flow, scale);
        for t in 0..flow.len().min(frames - 1) {
            out[t * 3 * hw..t * 3 * hw + 2 * hw].copy_from_slice(&fp[t * 2 * hw..(t + 1) * 2 * hw]);
        }
    }
    if let Some(m) = mask {
        for t in 0..frames {
            for (o, &v) in out[(t * 3 + 2) * hw..(t * 3 + 3) * hw].iter_mut().zip(m.data()) {
                *o = v as f32;
            }
        }
    }
    out
}

/// Flow with every field zeroed where `region` (per frame) is set.
pub fn zero_fill(flow: &FlowSequence, region: &MaskSequence) -> FlowSequence {
    let mut out = flow.clone();
    for t in 0..flow.len() {
        let m = region.frame_slice(t).to_vec();
        for (p, &v) in m.iter().enumerate() {
            if v == 1 {
                out.field_slice_mut(t)[2 * p] = 0.0;
                out.field_slice_mut(t)[2 * p + 1] = 0.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planes_roundtrip() {
        let data: Vec<f32> = (0..2 * 3 * 4 * 3).map(|i| (i % 11) as f32 / 10.0).collect();
        let clip = VideoClip::new(2, 3, 4, data).unwrap();
        let p = video_to_planes(&clip);
        assert_eq!(p[0], 2.0 * clip.pixel(0, 0, 0)[0] - 1.0);
        assert_eq!(p[12 + 5], 2.0 * clip.pixel(0, 1, 1)[1] - 1.0);
        let back = planes_to_video(&p, 2, 3, 4).unwrap();
        for (a, b) in back.data().iter().zip(clip.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hint_layout() {
        let mut flow = FlowSequence::zeros(1, 2, 2);
        flow.set(0, 1, 0, (2.0, -4.0));
        let mask = Mask::from_points(2, 2, &[(0, 1)]);
        let h = hint_planes(Some(&flow), Some(&mask), 2, 2, 2, 2.0);
        assert_eq!(&h[0..4], &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(&h[4..8], &[0.0, 0.0, -2.0, 0.0]);
        assert_eq!(&h[8..12], &[0.0, 1.0, 0.0, 0.0]);
        // padded final field is zero, mask repeated
        assert!(h[12..20].iter().all(|&v| v == 0.0));
        assert_eq!(&h[20..24], &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn masked_planes_zero_inside_box() {
        let clip = VideoClip::new(2, 2, 2, vec![1.0; 24]).unwrap();
        let bbox = MaskSequence::repeat(&Mask::from_points(2, 2, &[(0, 0)]), 2);
        let p = masked_planes(&clip, &bbox);
        assert_eq!(p[0], 0.0);
        assert_eq!(p[1], 1.0);
        assert_eq!(p[4], 0.0);
    }

    #[test]
    fn disk_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DataConfig { clips: 2, frames: 3, ..Default::default() };
        let clips = generate_clips(&cfg.distribution(), 2, |i| train_seed(7, i)).unwrap();
        write_dataset(dir.path(), &cfg, &clips).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].masks, clips[1].2.masks);
        assert_eq!(back[1].flow, clips[1].2.flow);
        assert_eq!(back[0].clip, clips[0].2.clip.quantized());
    }
}
