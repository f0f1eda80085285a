//! Synthetic sprite videos with analytic flow, and self-supervised samples.
//!
//! A single textured sprite (ellipse or star-convex polygon) moves over a
//! smooth static background under per-frame translation and uniform scale.
//! Colours are functions of sprite-local coordinates, so a pixel's colour is
//! carried exactly along the rigid motion and the forward flow is analytic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{EditSample, FlowSequence, MaskSequence, RgbImage, VideoClip};

/// Sprite geometry in sprite-local pixels (before scaling).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Ellipse { rx: f64, ry: f64 },
    /// Star-convex polygon with vertices at uniformly spaced angles.
    Polygon { radii: Vec<f64> },
}

impl Shape {
    pub fn contains(&self, qx: f64, qy: f64) -> bool {
        match self {
            Shape::Ellipse { rx, ry } => (qx / rx).powi(2) + (qy / ry).powi(2) <= 1.0,
            Shape::Polygon { radii } => {
                let n = radii.len();
                let step = std::f64::consts::TAU / n as f64;
                let mut ang = qy.atan2(qx);
                if ang < 0.0 {
                    ang += std::f64::consts::TAU;
                }
                let k = ((ang / step) as usize).min(n - 1);
                let (a0, a1) = (k as f64 * step, (k + 1) as f64 * step);
                let (x0, y0) = (radii[k] * a0.cos(), radii[k] * a0.sin());
                let (x1, y1) = (radii[(k + 1) % n] * a1.cos(), radii[(k + 1) % n] * a1.sin());
                // origin and q must lie on the same side of the edge
                let cross = |px: f64, py: f64| (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
                cross(qx, qy) * cross(0.0, 0.0) >= 0.0
            }
        }
    }

    /// Radius of the smallest origin-centred disc containing the shape.
    pub fn extent(&self) -> f64 {
        match self {
            Shape::Ellipse { rx, ry } => rx.max(*ry),
            Shape::Polygon { radii } => radii.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
}

/// Per-step motion: translation and the absolute scale at the next frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Trajectory {
    Explicit(Vec<Step>),
    /// Drawn from the generation seed: near-constant velocity with small
    /// jitter and slow scale drift, rejection-sampled to stay in the canvas.
    Random { max_speed: f64, max_scale_rate: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub background_seed: u64,
    pub shape: Shape,
    pub texture_seed: u64,
    pub initial: Pose,
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedVideo {
    pub clip: VideoClip,
    pub masks: MaskSequence,
    pub flow: FlowSequence,
    pub poses: Vec<Pose>,
}

pub const MAX_TRAJECTORY_RETRIES: usize = 200;

/// Sum of low-frequency sinusoids around a base colour.
#[derive(Clone, Debug)]
struct Texture {
    base: [f64; 3],
    waves: Vec<([f64; 3], f64, f64, f64)>, // (amplitude per channel, kx, ky, phase)
}

impl Texture {
    fn sample(rng: &mut ChaCha8Rng, base_range: (f64, f64), n_waves: usize, max_k: f64, max_amp: f64) -> Self {
        let base = [0; 3].map(|_| rng.gen_range(base_range.0..base_range.1));
        let waves = (0..n_waves)
            .map(|_| {
                let amp = [0; 3].map(|_| rng.gen_range(-max_amp..max_amp));
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                let k = rng.gen_range(0.3 * max_k..max_k);
                (amp, k * ang.cos(), k * ang.sin(), rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self { base, waves }
    }

    fn eval(&self, x: f64, y: f64) -> [f32; 3] {
        let mut c = self.base;
        for (amp, kx, ky, ph) in &self.waves {
            let s = (kx * x + ky * y + ph).sin();
            for i in 0..3 {
                c[i] += amp[i] * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0) as f32)
    }
}

fn sprite_texture(seed: u64) -> Texture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5971_7e00_0001);
    Texture::sample(&mut rng, (0.15, 0.85), 2, 0.3, 0.12)
}

fn background_texture(seed: u64) -> Texture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba66_0000_0002);
    Texture::sample(&mut rng, (0.25, 0.75), 2, 0.12, 0.1)
}

fn inside_canvas(pose: &Pose, extent: f64, height: usize, width: usize) -> bool {
    let r = extent * pose.scale + 1.0;
    pose.cx - r >= 0.0 && pose.cy - r >= 0.0 && pose.cx + r <= (width - 1) as f64 && pose.cy + r <= (height - 1) as f64
}

fn random_steps(rng: &mut ChaCha8Rng, frames: usize, max_speed: f64, max_scale_rate: f64, s0: f64) -> Vec<Step> {
    let speed = rng.gen_range(0.3 * max_speed..max_speed);
    let mut ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let rate = rng.gen_range(-max_scale_rate..max_scale_rate);
    let mut scale = s0;
    (1..frames)
        .map(|_| {
            ang += rng.gen_range(-0.3..0.3);
            scale *= 1.0 + rate;
            Step { dx: speed * ang.cos(), dy: speed * ang.sin(), scale }
        })
        .collect()
}

fn poses_from_steps(initial: Pose, steps: &[Step]) -> Vec<Pose> {
    let mut poses = vec![initial];
    for s in steps {
        let p = *poses.last().expect("non-empty");
        poses.push(Pose { cx: p.cx + s.dx, cy: p.cy + s.dy, scale: s.scale });
    }
    poses
}

/// Render a scene; deterministic in `(spec, seed)`.
pub fn generate(spec: &SceneSpec, seed: u64) -> Result<GeneratedVideo> {
    if spec.frames < 2 {
        return Err(Error::InvalidValue(format!("scene needs at least 2 frames, got {}", spec.frames)));
    }
    if spec.initial.scale <= 0.0 {
        return Err(Error::InvalidValue("sprite scale must be positive".into()));
    }
    let extent = spec.shape.extent();
    let poses = match &spec.trajectory {
        Trajectory::Explicit(steps) => {
            if steps.len() + 1 != spec.frames {
                return Err(Error::DimMismatch(format!("{} steps for {} frames", steps.len(), spec.frames)));
            }
            if steps.iter().any(|s| !(s.scale > 0.0) || !s.dx.is_finite() || !s.dy.is_finite()) {
                return Err(Error::InvalidValue("trajectory step must be finite with positive scale".into()));
            }
            let poses = poses_from_steps(spec.initial, steps);
            if !poses.iter().all(|p| inside_canvas(p, extent, spec.height, spec.width)) {
                return Err(Error::TrajectoryRejected(1));
            }
            poses
        }
        Trajectory::Random { max_speed, max_scale_rate } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut found = None;
            for _ in 0..MAX_TRAJECTORY_RETRIES {
                let steps = random_steps(&mut rng, spec.frames, *max_speed, *max_scale_rate, spec.initial.scale);
                let poses = poses_from_steps(spec.initial, &steps);
                if poses.iter().all(|p| inside_canvas(p, extent, spec.height, spec.width)) {
                    found = Some(poses);
                    break;
                }
            }
            found.ok_or(Error::TrajectoryRejected(MAX_TRAJECTORY_RETRIES))?
        }
    };
    Ok(render(spec, poses))
}

fn render(spec: &SceneSpec, poses: Vec<Pose>) -> GeneratedVideo {
    let (t_n, h, w) = (spec.frames, spec.height, spec.width);
    let sprite = sprite_texture(spec.texture_seed);
    let bg = background_texture(spec.background_seed);
    let mut clip = vec![0.0f32; t_n * h * w * 3];
    let mut masks = vec![0u8; t_n * h * w];
    let mut flow = vec![0.0f32; (t_n - 1) * h * w * 2];
    for (t, pose) in poses.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let i = (t * h + y) * w + x;
                let qx = (x as f64 - pose.cx) / pose.scale;
                let qy = (y as f64 - pose.cy) / pose.scale;
                let (rgb, inside) = if spec.shape.contains(qx, qy) {
                    (sprite.eval(qx, qy), true)
                } else {
                    (bg.eval(x as f64, y as f64), false)
                };
                clip[i * 3..i * 3 + 3].copy_from_slice(&rgb);
                if inside {
                    masks[i] = 1;
                    if t + 1 < t_n {
                        let next = poses[t + 1];
                        let ratio = next.scale / pose.scale;
                        let nx = next.cx + ratio * (x as f64 - pose.cx);
                        let ny = next.cy + ratio * (y as f64 - pose.cy);
                        flow[i * 2] = (nx - x as f64) as f32;
                        flow[i * 2 + 1] = (ny - y as f64) as f32;
                    }
                }
            }
        }
    }
    GeneratedVideo {
        clip: VideoClip::new(t_n, h, w, clip).expect("rendered clip is valid"),
        masks: MaskSequence::new(t_n, h, w, masks).expect("rendered masks are valid"),
        flow: FlowSequence::new(t_n - 1, h, w, flow).expect("rendered flow is valid"),
        poses,
    }
}

/// Parameters of the random scene distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDistribution {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub max_speed: f64,
    pub max_scale_rate: f64,
}

impl Default for SceneDistribution {
    fn default() -> Self {
        Self { height: 48, width: 64, frames: 8, min_radius: 8.0, max_radius: 13.0, max_speed: 1.5, max_scale_rate: 0.015 }
    }
}

/// Draw a random scene spec (shape, textures, start pose).
pub fn sample_spec(dist: &SceneDistribution, rng: &mut impl Rng) -> SceneSpec {
    let r = rng.gen_range(dist.min_radius..dist.max_radius);
    let shape = if rng.gen_bool(0.5) {
        Shape::Ellipse { rx: r, ry: r * rng.gen_range(0.6..1.0) }
    } else {
        let n = rng.gen_range(5..9);
        Shape::Polygon { radii: (0..n).map(|_| r * rng.gen_range(0.65..1.0)).collect() }
    };
    let margin = r + 2.0;
    let cx = rng.gen_range(margin..(dist.width as f64 - margin).max(margin + 1e-3));
    let cy = rng.gen_range(margin..(dist.height as f64 - margin).max(margin + 1e-3));
    SceneSpec {
        height: dist.height,
        width: dist.width,
        frames: dist.frames,
        background_seed: rng.gen(),
        shape,
        texture_seed: rng.gen(),
        initial: Pose { cx, cy, scale: 1.0 },
        trajectory: Trajectory::Random { max_speed: dist.max_speed, max_scale_rate: dist.max_scale_rate },
    }
}

/// Sample and render one clip from a seed; retries the spec itself if no
/// in-canvas trajectory exists for it.
pub fn generate_random(dist: &SceneDistribution, seed: u64) -> Result<(SceneSpec, GeneratedVideo)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = Error::TrajectoryRejected(0);
    for _ in 0..8 {
        let spec = sample_spec(dist, &mut rng);
        let traj_seed = rng.gen();
        match generate(&spec, traj_seed) {
            Ok(gv) => return Ok((spec, gv)),
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Crop the `bbox` rectangle of one frame.
pub fn crop_frame(clip: &VideoClip, t: usize, bbox: (usize, usize, usize, usize)) -> RgbImage {
    let (y0, x0, y1, x1) = bbox;
    let (h, w) = (y1 - y0 + 1, x1 - x0 + 1);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in y0..=y1 {
        for x in x0..=x1 {
            data.extend_from_slice(&clip.pixel(t, y, x));
        }
    }
    RgbImage { height: h, width: w, data }
}

/// Build the self-supervised tuple using frame `t` as the appearance
/// reference.
pub fn make_sample(gv: &GeneratedVideo, t: usize) -> Result<EditSample> {
    let frames = gv.clip.frames();
    if t >= frames {
        return Err(Error::InvalidValue(format!("reference frame {t} out of range 0..{frames}")));
    }
    let ref_mask = gv.masks.frame(t);
    let bounds = ref_mask.bounds().ok_or(Error::EmptyMask(t))?;
    let bbox_mask = gv.masks.bboxes();
    Ok(EditSample {
        masked_video: gv.clip.masked(&bbox_mask)?,
        ref_image: crop_frame(&gv.clip, t, bounds),
        structure_mask: gv.masks.frame(0),
        flow: gv.flow.clone(),
        bbox_mask,
        target_video: gv.clip.clone(),
        target_masks: gv.masks.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::bbox_of;

    fn spec(steps: Vec<Step>) -> SceneSpec {
        SceneSpec {
            height: 24,
            width: 32,
            frames: steps.len() + 1,
            background_seed: 1,
            shape: Shape::Ellipse { rx: 4.5, ry: 3.5 },
            texture_seed: 2,
            initial: Pose { cx: 10.3, cy: 11.6, scale: 1.0 },
            trajectory: Trajectory::Explicit(steps),
        }
    }

    #[test]
    fn static_sprite_has_zero_flow_and_constant_masks() {
        let gv = generate(&spec(vec![Step { dx: 0.0, dy: 0.0, scale: 1.0 }; 3]), 0).unwrap();
        assert!(gv.flow.data().iter().all(|&v| v == 0.0));
        for t in 1..4 {
            assert_eq!(gv.masks.frame(t), gv.masks.frame(0));
        }
    }

    #[test]
    fn translation_flow_and_shifted_masks() {
        let gv = generate(&spec(vec![Step { dx: 2.0, dy: 0.0, scale: 1.0 }; 3]), 0).unwrap();
        for t in 0..3 {
            let m = gv.masks.frame(t);
            let next = gv.masks.frame(t + 1);
            for y in 0..24 {
                for x in 0..32 {
                    let want = if m.get(y, x) == 1 { (2.0, 0.0) } else { (0.0, 0.0) };
                    let (u, v) = gv.flow.at(t, y, x);
                    assert!((u - want.0).abs() < 1e-9 && (v - want.1).abs() < 1e-9);
                    if x + 2 < 32 {
                        assert_eq!(next.get(y, x + 2), m.get(y, x), "t={t} ({y},{x})");
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_canvas_trajectory_is_rejected() {
        let r = generate(&spec(vec![Step { dx: 30.0, dy: 0.0, scale: 1.0 }]), 0);
        assert!(matches!(r, Err(Error::TrajectoryRejected(_))));
    }

    #[test]
    fn random_generation_is_deterministic() {
        let dist = SceneDistribution::default();
        let (s1, a) = generate_random(&dist, 42).unwrap();
        let (s2, b) = generate_random(&dist, 42).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(a, b);
        let (_, c) = generate_random(&dist, 43).unwrap();
        assert_ne!(a.clip, c.clip);
    }

    #[test]
    fn sample_masks_bbox_and_crops_reference() {
        let (_, gv) = generate_random(&SceneDistribution::default(), 7).unwrap();
        let s = make_sample(&gv, 0).unwrap();
        let (y0, x0, y1, x1) = gv.masks.frame(0).bounds().unwrap();
        assert_eq!((s.ref_image.height, s.ref_image.width), (y1 - y0 + 1, x1 - x0 + 1));
        for t in 0..gv.clip.frames() {
            let bb = bbox_of(&gv.masks.frame(t));
            for y in 0..gv.clip.height() {
                for x in 0..gv.clip.width() {
                    let px = s.masked_video.pixel(t, y, x);
                    if bb.get(y, x) == 1 {
                        assert_eq!(px, [0.0; 3]);
                    } else {
                        assert_eq!(px, gv.clip.pixel(t, y, x));
                    }
                }
            }
        }
        assert_eq!(s.structure_mask, gv.masks.frame(0));
        assert!(make_sample(&gv, 99).is_err());
    }

    #[test]
    fn polygon_contains_its_vertices_interior() {
        let s = Shape::Polygon { radii: vec![5.0, 4.0, 6.0, 5.0, 4.5] };
        assert!(s.contains(0.0, 0.0));
        assert!(s.contains(3.9, 0.0));
        assert!(!s.contains(5.1, 0.0));
        assert!(!s.contains(0.0, 7.0));
    }
}
