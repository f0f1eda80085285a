//! Shape-guided editing: edit-region propagation, flow completion, guided
//! DDIM sampling with background preservation, and chaining of batches
//! into longer videos.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vase_autograd::{Array, Ctx, Graph, ParamStore, Trainable};
use vase_core::types::edit_region;
use vase_core::warp::{warp_added_region, warp_region_sequence};
use vase_core::{FlowSequence, Mask, MaskSequence, RgbImage, VideoClip};

use crate::blocks::Clip;
use crate::config::{RunConfig, SampleConfig};
use crate::data::{hint_planes, masked_planes, ref_planes, video_to_planes, zero_fill};
use crate::error::{Error, Result};
use crate::schedule::{cfg_combine, ddim_step, q_sample, GuidanceScales, NoiseSchedule};
use crate::trainer::{latest_checkpoint, load_checkpoint, Networks, Stage};
use crate::unet::UNetInput;
use crate::wfcn::{complete_flow, WfcnInput};

/// Source video and the requested first-frame shape.
#[derive(Clone, Debug)]
pub struct EditRequest {
    pub source: VideoClip,
    pub masks: MaskSequence,
    pub flow: FlowSequence,
    pub ref_image: RgbImage,
    pub m_ref: Mask,
}

impl EditRequest {
    pub fn validate(&self) -> Result<()> {
        let (t, h, w) = (self.source.frames(), self.source.height(), self.source.width());
        if (self.masks.frames(), self.masks.height(), self.masks.width()) != (t, h, w) {
            return Err(Error::Shape { tensor: "masks".into(), detail: format!("masks do not match {t}x{h}x{w} video") });
        }
        self.flow.check_pairs_with(t, h, w)?;
        self.m_ref.same_dims(&self.masks.frame(0))?;
        if self.m_ref.is_empty() && self.masks.frame(0).is_empty() {
            return Err(Error::EmptyEdit);
        }
        Ok(())
    }
}

/// Propagated edit: where the shape changes and what the object becomes.
#[derive(Clone, Debug, PartialEq)]
pub struct EditPlan {
    /// Warped edit region Ẽ (removed ∪ added parts), one mask per frame.
    pub region: MaskSequence,
    /// Target object masks M̃.
    pub structure: MaskSequence,
    /// Flow with the added part's motion infilled from the object.
    pub flow: FlowSequence,
    /// Per-frame tight box around source object and edit region.
    pub bbox: MaskSequence,
}

/// Warp the first-frame edit through the clip: removed pixels follow the
/// source flow, added pixels follow the nearest object pixel's flow.
pub fn plan_edit(req: &EditRequest, threshold: f64) -> Result<EditPlan> {
    let m0 = req.masks.frame(0);
    let e0 = edit_region(&req.m_ref, &m0)?;
    let removed0 = e0.and(&m0);
    let added0 = e0.minus(&m0);
    let removed = warp_region_sequence(&removed0, &req.flow, threshold)?;
    let (added, flow) = warp_added_region(&added0, &req.flow, &req.masks, threshold)?;
    let mut structure = req.masks.minus(&removed).or(&added);
    structure.set_frame(0, &req.m_ref);
    let region = removed.or(&added);
    let bbox = req.masks.or(&region).bboxes();
    Ok(EditPlan { region, structure, flow, bbox })
}

/// Result of one edited batch.
#[derive(Clone, Debug)]
pub struct EditOutput {
    pub video: VideoClip,
    /// Thresholded segmentation of the final denoising step.
    pub pred_masks: MaskSequence,
    pub plan: EditPlan,
    pub completed_flow: FlowSequence,
}

/// Sampler options.
#[derive(Clone, Copy, Debug)]
pub struct SampleOptions {
    pub scales: GuidanceScales,
    pub ddim_steps: usize,
    pub dilate: usize,
    pub warp_threshold: f64,
    pub seed: u64,
}

impl SampleOptions {
    pub fn from_config(cfg: &SampleConfig, seed: u64) -> Self {
        Self {
            scales: GuidanceScales { image: cfg.s_image, mask: cfg.s_mask, flow: cfg.s_flow },
            ddim_steps: cfg.ddim_steps,
            dilate: cfg.dilate,
            warp_threshold: cfg.warp_threshold,
            seed,
        }
    }
}

/// Trained networks ready for inference.
pub struct Editor {
    pub cfg: RunConfig,
    pub nets: Networks,
    pub store: ParamStore<f32>,
    pub schedule: NoiseSchedule,
}

/// Number of conditioning combinations evaluated per denoising step.
const PASSES: usize = 4;

impl Editor {
    pub fn new(cfg: RunConfig, store: ParamStore<f32>) -> Self {
        Self { nets: Networks::new(&cfg), cfg, store, schedule: NoiseSchedule::default() }
    }

    /// Load the newest stage-3 checkpoint under `dir`.
    pub fn load(cfg: RunConfig, dir: &Path) -> Result<Self> {
        let path = latest_checkpoint(dir, Stage::Three)
            .ok_or_else(|| Error::Config(format!("no {} checkpoint under {}", Stage::Three, dir.display())))?;
        let loaded = load_checkpoint(&path, &cfg)?;
        Ok(Self::new(cfg, loaded.store))
    }

    /// Edit one batch of frames.
    pub fn edit(&self, req: &EditRequest, opts: &SampleOptions) -> Result<EditOutput> {
        self.edit_inner(req, opts, None)
    }

    /// Edit a clip longer than one batch by chaining batches of
    /// `batch_frames`, each starting from the previous batch's last edited
    /// frame given clean. The seam frame appears once in the output.
    pub fn edit_chained(&self, req: &EditRequest, opts: &SampleOptions, batch_frames: usize) -> Result<Vec<EditOutput>> {
        req.validate()?;
        let total = req.source.frames();
        if batch_frames < 2 || total < batch_frames || (total - 1) % (batch_frames - 1) != 0 {
            return Err(Error::Config(format!("{total} frames cannot be chained in batches of {batch_frames}")));
        }
        let mut outputs: Vec<EditOutput> = Vec::new();
        let mut start = 0;
        while start + batch_frames <= total {
            let part = EditRequest {
                source: req.source.slice(start, batch_frames),
                masks: req.masks.slice(start, batch_frames),
                flow: req.flow.slice(start, batch_frames - 1),
                ref_image: req.ref_image.clone(),
                m_ref: match outputs.last() {
                    Some(prev) => prev.plan.structure.frame(batch_frames - 1),
                    None => req.m_ref.clone(),
                },
            };
            let out = match outputs.last() {
                Some(prev) => self.edit_inner(&part, opts, Some(prev.video.frame(batch_frames - 1)))?,
                None => self.edit_inner(&part, opts, None)?,
            };
            outputs.push(out);
            start += batch_frames - 1;
        }
        Ok(outputs)
    }

    fn edit_inner(&self, req: &EditRequest, opts: &SampleOptions, clean_first: Option<&[f32]>) -> Result<EditOutput> {
        req.validate()?;
        opts.scales.validate()?;
        let (frames, h, w) = (req.source.frames(), req.source.height(), req.source.width());
        let hw = h * w;
        let plan = plan_edit(req, opts.warp_threshold)?;
        let completed_flow = complete_flow(
            &self.nets.wfcn,
            &self.store,
            &WfcnInput { warped_region: plan.region.clone(), flow: zero_fill(&plan.flow, &plan.region), structure: plan.structure.clone() },
        )?;

        // The clean source the background is copied from; a chained batch
        // starts from the previous batch's output frame, given unmasked.
        let mut source = req.source.clone();
        let mut bbox = plan.bbox.clone();
        if let Some(first) = clean_first {
            source.frame_mut(0).copy_from_slice(first);
            bbox.set_frame(0, &Mask::zeros(h, w));
        }
        let x_src = video_to_planes(&source);
        let masked = masked_planes(&source, &bbox);
        let bbox_planes: Vec<f32> = bbox.data().iter().map(|&v| v as f32).collect();
        let scale = self.cfg.model.flow_scale;
        let hints = [
            hint_planes(None, None, frames, h, w, scale),
            hint_planes(None, None, frames, h, w, scale),
            hint_planes(None, Some(&req.m_ref), frames, h, w, scale),
            hint_planes(Some(&completed_flow), Some(&req.m_ref), frames, h, w, scale),
        ]
        .concat();
        let refs = ref_planes(&req.ref_image, self.cfg.model.ref_size).repeat(PASSES);
        let keep_image = [false, true, true, true];
        let n = PASSES * frames;
        let r = self.cfg.model.ref_size;

        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut z: Vec<f32> = (0..x_src.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut pred = MaskSequence::zeros(frames, h, w);
        for (t, t_prev) in self.schedule.ddim_pairs(opts.ddim_steps) {
            let (eps, logits) = {
                let g = Graph::<f32>::new();
                let ctx = Ctx::new(&g, &self.store, Trainable::Nothing);
                let c = |shape: &[usize], v: Vec<f32>| ctx.constant(Array::from_vec(shape, v));
                let app = self.nets.denoiser.app.embed(&ctx, c(&[PASSES, 3, r, r], refs.clone()), &keep_image);
                let input = UNetInput {
                    z: c(&[n, 3, h, w], z.repeat(PASSES)),
                    masked: c(&[n, 3, h, w], masked.repeat(PASSES)),
                    bbox: c(&[n, 1, h, w], bbox_planes.repeat(PASSES)),
                    steps: vec![t as f64; PASSES],
                    app,
                    clip: Clip { batch: PASSES, frames },
                };
                let out = self.nets.denoiser.forward(&ctx, &input, Some(c(&[n, 3, h, w], hints.clone())), true);
                let logits = self.nets.denoiser.seg.forward(&ctx, out.seg_feature, out.temb);
                (out.eps.value(), logits.value())
            };
            let per = frames * 3 * hw;
            let e = eps.data();
            let guided = cfg_combine(&e[..per], &e[per..2 * per], &e[2 * per..3 * per], &e[3 * per..], opts.scales)?;
            if guided.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("guided noise at step {t}")));
            }
            // segmentation of the fully conditioned pass
            let l = &logits.data()[3 * frames * hw..];
            pred = MaskSequence::new(frames, h, w, l.iter().map(|&v| u8::from(v >= 0.0)).collect())?;
            z = ddim_step(&z, &guided, t, t_prev, &self.schedule);
            let keep = keep_mask(&bbox, &pred, &plan.region, opts.dilate);
            let noise: Vec<f32> = (0..x_src.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let known = q_sample(&x_src, t_prev, &noise, &self.schedule);
            blend_kept(&mut z, &known, &keep, frames, hw);
        }

        let keep = keep_mask(&bbox, &pred, &plan.region, opts.dilate);
        let video = compose(&z, &source, &keep)?;
        Ok(EditOutput { video, pred_masks: pred, plan, completed_flow })
    }
}

/// Pixels restored from the source: everything outside the box, and inside
/// it everything away from the (dilated) predicted object and edit region.
pub fn keep_mask(bbox: &MaskSequence, pred: &MaskSequence, region: &MaskSequence, dilate: usize) -> MaskSequence {
    bbox.map_frames(|t, b| {
        let edited = pred.frame(t).or(&region.frame(t)).dilate(dilate).and(b);
        edited.complement()
    })
}

/// `z ← keep ⊙ known + (1 − keep) ⊙ z` on `[T, 3, H, W]` planes.
pub fn blend_kept(z: &mut [f32], known: &[f32], keep: &MaskSequence, frames: usize, hw: usize) {
    for f in 0..frames {
        let k = keep.frame_slice(f);
        for c in 0..3 {
            let base = (f * 3 + c) * hw;
            for p in 0..hw {
                if k[p] == 1 {
                    z[base + p] = known[base + p];
                }
            }
        }
    }
}

/// Decode the final latent and copy kept pixels from the source unchanged.
fn compose(z: &[f32], source: &VideoClip, keep: &MaskSequence) -> Result<VideoClip> {
    let (frames, h, w) = (source.frames(), source.height(), source.width());
    let mut video = crate::data::planes_to_video(z, frames, h, w)?;
    for f in 0..frames {
        let k = keep.frame_slice(f).to_vec();
        let src = source.frame(f).to_vec();
        let dst = video.frame_mut(f);
        for (p, &kv) in k.iter().enumerate() {
            if kv == 1 {
                dst[p * 3..p * 3 + 3].copy_from_slice(&src[p * 3..p * 3 + 3]);
            }
        }
    }
    Ok(video)
}

/// Join chained batches, dropping each duplicated seam frame.
pub fn concat_chained(parts: &[EditOutput]) -> Result<VideoClip> {
    let mut clips = Vec::with_capacity(parts.len());
    for (i, p) in parts.iter().enumerate() {
        clips.push(if i == 0 { p.video.clone() } else { p.video.slice(1, p.video.frames() - 1) });
    }
    let refs: Vec<&VideoClip> = clips.iter().collect();
    Ok(VideoClip::concat(&refs)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, y0: usize, x0: usize, s: usize) -> Mask {
        let pts: Vec<(usize, usize)> = (y0..y0 + s).flat_map(|y| (x0..x0 + s).map(move |x| (y, x))).collect();
        Mask::from_points(h, w, &pts)
    }

    fn static_request(m_ref: Mask) -> EditRequest {
        let (t, h, w) = (3, 8, 8);
        let obj = square(h, w, 2, 2, 3);
        EditRequest {
            source: VideoClip::new(t, h, w, (0..t * h * w * 3).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap(),
            masks: MaskSequence::repeat(&obj, t),
            flow: FlowSequence::zeros(t - 1, h, w),
            ref_image: RgbImage::new(2, 2, vec![0.5; 12]).unwrap(),
            m_ref,
        }
    }

    #[test]
    fn identity_edit_has_empty_region() {
        let req = static_request(square(8, 8, 2, 2, 3));
        let plan = plan_edit(&req, 0.5).unwrap();
        assert!(plan.region.count() == 0);
        assert_eq!(plan.structure, req.masks);
    }

    #[test]
    fn static_removal_and_addition_propagate() {
        // grow the square by one column and drop its top row
        let mut m = square(8, 8, 3, 2, 2).or(&Mask::from_points(8, 8, &[(3, 4), (4, 4)]));
        m.set(3, 5, 1);
        let req = static_request(m.clone());
        let plan = plan_edit(&req, 0.5).unwrap();
        for t in 0..3 {
            assert_eq!(plan.structure.frame(t), m, "frame {t}");
            assert_eq!(plan.region.frame(t), m.xor(&req.masks.frame(0)));
        }
        assert!(plan.bbox.frame(0).get(2, 5) == 1);
    }

    #[test]
    fn empty_edit_rejected() {
        let mut req = static_request(Mask::zeros(8, 8));
        req.masks = MaskSequence::zeros(3, 8, 8);
        assert!(matches!(req.validate(), Err(Error::EmptyEdit)));
    }

    #[test]
    fn keep_outside_box_always() {
        let bbox = MaskSequence::repeat(&square(6, 6, 1, 1, 3), 2);
        let pred = MaskSequence::repeat(&Mask::ones(6, 6), 2);
        let keep = keep_mask(&bbox, &pred, &MaskSequence::zeros(2, 6, 6), 0);
        assert_eq!(keep.frame(1), square(6, 6, 1, 1, 3).complement());
        let none = keep_mask(&bbox, &MaskSequence::zeros(2, 6, 6), &MaskSequence::zeros(2, 6, 6), 2);
        assert_eq!(none.count(), 72);
    }

    #[test]
    fn blend_replaces_only_kept() {
        let keep = MaskSequence::new(1, 1, 2, vec![1, 0]).unwrap();
        let mut z = vec![0.0; 6];
        blend_kept(&mut z, &[1.0; 6], &keep, 1, 2);
        assert_eq!(z, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }
}
