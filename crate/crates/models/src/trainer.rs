//! Flow-completion pretraining and the three diffusion training stages:
//! batch construction (self-supervised samples, conditioning dropout, clean
//! first frames, motion-clustering augmentation), losses, Adam updates,
//! divergence detection, checkpoints and loss curves.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vase_autograd::{Adam, Array, Checkpoint, Ctx, Graph, ParamStore, Scalar, Trainable, Var};
use vase_core::jfsa::{sample_augmentation, JfsaConfig};
use vase_core::synth::{make_sample, GeneratedVideo};
use vase_core::warp::warp_region_sequence;
use vase_core::{EditSample, FlowSequence, MaskSequence};

use crate::blocks::Clip;
use crate::config::{RunConfig, TrainConfig};
use crate::data::{flow_planes, masked_planes, masks_to_planes, ref_planes, video_to_planes, zero_fill};
use crate::error::{Error, Result};
use crate::schedule::{q_sample, NoiseSchedule};
use crate::unet::{copy_encoder_to_control, Denoiser, UNetInput, APP, CTRL, SEG, UNET};
use crate::wfcn::{stack_inputs, Wfcn, WfcnInput, WFCN};

/// Consecutive steps above 10× the initial loss that abort a run.
pub const DIVERGENCE_WINDOW: usize = 100;
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Flow-completion pretraining.
    Wfcn,
    /// Denoiser (UNet + appearance encoder), no control.
    One,
    /// Control branch on the original flow and first-frame mask.
    Two,
    /// Control branch, flow completion and segmentation head on augmented samples.
    Three,
}

impl Stage {
    pub fn id(self) -> u64 {
        match self {
            Stage::Wfcn => 0,
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }

    pub fn from_id(id: u64) -> Option<Stage> {
        [Stage::Wfcn, Stage::One, Stage::Two, Stage::Three].into_iter().find(|s| s.id() == id)
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Wfcn => "wfcn",
            Stage::One => "stage1",
            Stage::Two => "stage2",
            Stage::Three => "stage3",
        }
    }

    pub fn trainable_prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::Wfcn => &[WFCN],
            Stage::One => &[UNET, APP],
            Stage::Two => &[CTRL],
            Stage::Three => &[CTRL, WFCN, SEG],
        }
    }

    /// Prefixes whose values must not change during the stage.
    pub fn frozen_prefixes(self) -> Vec<&'static str> {
        [UNET, APP, CTRL, SEG, WFCN].into_iter().filter(|p| !self.trainable_prefixes().contains(p)).collect()
    }

    pub fn trainable(self) -> Trainable {
        Trainable::prefixes(self.trainable_prefixes())
    }

    pub fn steps(self, cfg: &TrainConfig) -> usize {
        match self {
            Stage::Wfcn => cfg.wfcn_steps,
            Stage::One => cfg.stage1_steps,
            Stage::Two => cfg.stage2_steps,
            Stage::Three => cfg.stage3_steps,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Which conditions a training sample keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CondFlags {
    pub use_image: bool,
    pub use_flow: bool,
    pub use_mask: bool,
    pub clean_first_frame: bool,
}

impl CondFlags {
    pub const ALL: CondFlags = CondFlags { use_image: true, use_flow: true, use_mask: true, clean_first_frame: false };

    /// Flow is only ever given together with the mask, matching the nested
    /// guidance terms.
    pub fn flow_effective(&self) -> bool {
        self.use_flow && self.use_mask
    }
}

/// Independent Bernoulli draws of the conditioning dropout flags.
pub fn dropout_draw(rng: &mut impl Rng, cfg: &TrainConfig) -> CondFlags {
    CondFlags {
        use_image: !rng.gen_bool(cfg.p_image),
        use_flow: !rng.gen_bool(cfg.p_flow),
        use_mask: !rng.gen_bool(cfg.p_mask),
        clean_first_frame: rng.gen_bool(cfg.p_clean),
    }
}

/// Deterministic per-step generator: one ChaCha stream per (stage, step).
pub fn step_rng(seed: u64, stage: Stage, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage.id() << 48) | step as u64);
    rng
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Networks of a run.
#[derive(Clone, Debug)]
pub struct Networks {
    pub denoiser: Denoiser,
    pub wfcn: Wfcn,
}

impl Networks {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { denoiser: Denoiser::new(&cfg.model), wfcn: Wfcn::new(&cfg.wfcn, cfg.model.flow_scale) }
    }

    /// Fresh parameters for every network, deterministic in `seed`.
    pub fn init_store(&self, seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.denoiser.init(&mut store, &mut rng);
        self.wfcn.init(&mut store, &mut rng);
        store
    }
}

/// One clip prepared for the flow-completion network.
#[derive(Clone, Debug)]
pub struct WfcnSample {
    pub input: WfcnInput,
    /// Flow the completion should reproduce.
    pub target: FlowSequence,
    /// Region whose flow was erased.
    pub corrupted: MaskSequence,
}

/// Augment a sample, erase the flow inside the chosen region and warp the
/// region's first frame along the augmented flow. Without an augmentation
/// the input flow is left intact and the warped region is empty.
pub fn wfcn_sample(aug: &EditSample, region: Option<&MaskSequence>, threshold: f64) -> Result<WfcnSample> {
    let frames = aug.target_masks.frames();
    let (h, w) = (aug.flow.height(), aug.flow.width());
    let (warped, corrupted) = match region {
        Some(r) => (warp_region_sequence(&r.frame(0), &aug.flow, threshold)?, r.clone()),
        None => (MaskSequence::zeros(frames, h, w), MaskSequence::zeros(frames, h, w)),
    };
    Ok(WfcnSample {
        input: WfcnInput { warped_region: warped, flow: zero_fill(&aug.flow, &corrupted), structure: aug.target_masks.clone() },
        target: aug.flow.clone(),
        corrupted,
    })
}

/// Draw the wFCN pretraining sample for one clip: an augmentation is always
/// applied so there is a region to complete.
pub fn draw_wfcn_sample(gv: &GeneratedVideo, jfsa: &JfsaConfig, threshold: f64, rng: &mut impl Rng) -> Result<WfcnSample> {
    let sample = make_sample(gv, 0)?;
    let forced = JfsaConfig { p_augm: 1.0, ..jfsa.clone() };
    let (aug, a) = sample_augmentation(&sample, &forced, rng)?;
    wfcn_sample(&aug, a.as_ref().map(|a| &a.region), threshold)
}

/// Mean squared flow error over all pixels, and over the corrupted region only.
pub fn flow_errors(pred: &FlowSequence, target: &FlowSequence, region: &MaskSequence) -> (f64, f64) {
    let hw = pred.height() * pred.width();
    let (mut all, mut inside, mut count) = (0.0, 0.0, 0usize);
    for t in 0..pred.len() {
        let m = region.frame_slice(t);
        let (a, b) = (pred.field_slice(t), target.field_slice(t));
        for p in 0..hw {
            let e = (a[2 * p] as f64 - b[2 * p] as f64).powi(2) + (a[2 * p + 1] as f64 - b[2 * p + 1] as f64).powi(2);
            all += e;
            if m[p] == 1 {
                inside += e;
                count += 1;
            }
        }
    }
    let n = (pred.len() * hw * 2) as f64;
    (all / n, if count == 0 { 0.0 } else { inside / (2 * count) as f64 })
}

/// Flow hint of a diffusion batch.
#[derive(Clone, Debug)]
pub enum FlowHint {
    /// Scaled flow planes `[N, 2, H, W]`, already padded and dropped.
    Given(Array<f32>),
    /// Run the completion network on these inputs; `keep[b]` masks dropped clips.
    Complete { x: Array<f32>, flow: Array<f32>, keep: Vec<bool> },
}

/// Control-branch inputs of a diffusion batch.
#[derive(Clone, Debug)]
pub struct ControlBatch {
    /// Structure mask planes `[N, 1, H, W]` (zero where dropped).
    pub mask: Array<f32>,
    pub flow: FlowHint,
}

/// Everything one optimisation step of the denoiser needs, as constants.
#[derive(Clone, Debug)]
pub struct DiffusionBatch {
    pub clip: Clip,
    pub height: usize,
    pub width: usize,
    pub z: Array<f32>,
    pub noise: Array<f32>,
    pub masked: Array<f32>,
    pub bbox: Array<f32>,
    pub refs: Array<f32>,
    pub keep_image: Vec<bool>,
    pub steps: Vec<f64>,
    pub control: Option<ControlBatch>,
    pub seg_target: Option<Array<f32>>,
    /// Clips that used an augmentation / a clean first frame (diagnostics).
    pub augmented: usize,
    pub clean: usize,
    pub flags: Vec<CondFlags>,
}

/// Per-clip pieces before stacking.
struct ClipParts {
    x0: Vec<f32>,
    noise: Vec<f32>,
    masked: Vec<f32>,
    bbox: Vec<f32>,
    refs: Vec<f32>,
    step: f64,
    flags: CondFlags,
    mask_planes: Vec<f32>,
    flow: Option<Vec<f32>>,
    wfcn: Option<WfcnInput>,
    seg: Vec<f32>,
    augmented: bool,
}

/// Builds diffusion batches for a stage.
pub struct BatchBuilder<'a> {
    pub cfg: &'a RunConfig,
    pub schedule: &'a NoiseSchedule,
}

impl BatchBuilder<'_> {
    fn clip_parts(&self, stage: Stage, gv: &GeneratedVideo, rng: &mut ChaCha8Rng) -> Result<ClipParts> {
        let frames = gv.clip.frames();
        let (h, w) = (gv.clip.height(), gv.clip.width());
        let hw = h * w;
        let t_ref = rng.gen_range(0..frames);
        let step = rng.gen_range(0..self.schedule.len()) as f64;
        let mut flags = dropout_draw(rng, &self.cfg.train);
        if stage == Stage::One {
            flags.use_flow = false;
            flags.use_mask = false;
        }
        let sample = make_sample(gv, t_ref)?;
        let (mut sample, region) = if stage == Stage::Three && !flags.clean_first_frame {
            let (s, a) = sample_augmentation(&sample, &self.cfg.jfsa.to_jfsa(), rng)?;
            (s, a.map(|a| a.region))
        } else {
            (sample, None)
        };
        if flags.clean_first_frame {
            // the first frame is given unmasked, as when chaining clips
            let first = sample.target_video.frame(0).to_vec();
            sample.masked_video.frame_mut(0).copy_from_slice(&first);
            sample.bbox_mask.set_frame(0, &vase_core::Mask::zeros(h, w));
        }
        let x0 = video_to_planes(&sample.target_video);
        let noise = gaussian(rng, x0.len());
        let masked = masked_planes(&sample.masked_video, &sample.bbox_mask);
        let mask_planes = if flags.use_mask {
            let m: Vec<f32> = sample.structure_mask.data().iter().map(|&v| v as f32).collect();
            m.repeat(frames)
        } else {
            vec![0.0; frames * hw]
        };
        let (flow, wfcn) = match stage {
            Stage::Two => {
                let mut planes = vec![0f32; frames * 2 * hw];
                if flags.flow_effective() {
                    let f = flow_planes(&sample.flow, self.cfg.model.flow_scale);
                    planes[..f.len()].copy_from_slice(&f);
                }
                (Some(planes), None)
            }
            Stage::Three => (None, Some(wfcn_sample(&sample, region.as_ref(), self.cfg.sample.warp_threshold)?.input)),
            _ => (None, None),
        };
        Ok(ClipParts {
            x0,
            noise,
            masked,
            bbox: masks_to_planes(&sample.bbox_mask),
            refs: ref_planes(&sample.ref_image, self.cfg.model.ref_size),
            step,
            flags,
            mask_planes,
            flow,
            wfcn,
            seg: masks_to_planes(&sample.target_masks),
            augmented: region.is_some(),
        })
    }

    /// Batch for `stage` drawn entirely from `rng`.
    pub fn build(&self, stage: Stage, data: &[GeneratedVideo], batch: usize, rng: &mut ChaCha8Rng) -> Result<DiffusionBatch> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let clips: Vec<&GeneratedVideo> = (0..batch).map(|_| &data[rng.gen_range(0..data.len())]).collect();
        let parts = clips.iter().map(|gv| self.clip_parts(stage, gv, rng)).collect::<Result<Vec<_>>>()?;
        self.stack(stage, parts, clips[0].clip.frames(), clips[0].clip.height(), clips[0].clip.width())
    }

    fn stack(&self, stage: Stage, parts: Vec<ClipParts>, frames: usize, h: usize, w: usize) -> Result<DiffusionBatch> {
        let b = parts.len();
        let n = b * frames;
        let r = self.cfg.model.ref_size;
        let cat = |f: &dyn Fn(&ClipParts) -> &[f32]| parts.iter().flat_map(|p| f(p).iter().copied()).collect::<Vec<f32>>();
        let x0 = cat(&|p| &p.x0);
        let noise = cat(&|p| &p.noise);
        let per = frames * 3 * h * w;
        let mut z = Vec::with_capacity(x0.len());
        for (i, p) in parts.iter().enumerate() {
            z.extend(q_sample(&x0[i * per..(i + 1) * per], p.step as i64, &noise[i * per..(i + 1) * per], self.schedule));
        }
        let control = match stage {
            Stage::Wfcn | Stage::One => None,
            Stage::Two => Some(ControlBatch {
                mask: Array::from_vec(&[n, 1, h, w], cat(&|p| &p.mask_planes)),
                flow: FlowHint::Given(Array::from_vec(&[n, 2, h, w], cat(&|p| p.flow.as_deref().unwrap_or(&[])))),
            }),
            Stage::Three => {
                let inputs: Vec<&WfcnInput> = parts.iter().map(|p| p.wfcn.as_ref().expect("stage 3 input")).collect();
                let (x, flow, _) = stack_inputs::<f32>(&inputs, self.cfg.model.flow_scale)?;
                Some(ControlBatch {
                    mask: Array::from_vec(&[n, 1, h, w], cat(&|p| &p.mask_planes)),
                    flow: FlowHint::Complete { x, flow, keep: parts.iter().map(|p| p.flags.flow_effective()).collect() },
                })
            }
        };
        Ok(DiffusionBatch {
            clip: Clip { batch: b, frames },
            height: h,
            width: w,
            z: Array::from_vec(&[n, 3, h, w], z),
            noise: Array::from_vec(&[n, 3, h, w], noise),
            masked: Array::from_vec(&[n, 3, h, w], cat(&|p| &p.masked)),
            bbox: Array::from_vec(&[n, 1, h, w], cat(&|p| &p.bbox)),
            refs: Array::from_vec(&[b, 3, r, r], cat(&|p| &p.refs)),
            keep_image: parts.iter().map(|p| p.flags.use_image).collect(),
            steps: parts.iter().map(|p| p.step).collect(),
            control,
            seg_target: (stage == Stage::Three).then(|| Array::from_vec(&[n, 1, h, w], cat(&|p| &p.seg))),
            augmented: parts.iter().filter(|p| p.augmented).count(),
            clean: parts.iter().filter(|p| p.flags.clean_first_frame).count(),
            flags: parts.iter().map(|p| p.flags).collect(),
        })
    }
}

/// Loss terms of one forward pass.
pub struct Losses<'g, T: Scalar> {
    pub total: Var<'g, T>,
    pub simple: Var<'g, T>,
    pub bce: Option<Var<'g, T>>,
}

/// `[B·(T−1), 2, H, W]` flow → `[B·T, 2, H, W]` with a zero field appended
/// per clip and dropped clips zeroed.
fn pad_flow<'g, T: Scalar>(ctx: &Ctx<'g, T>, flow: Var<'g, T>, clip: Clip, keep: &[bool]) -> Var<'g, T> {
    let s = flow.shape();
    let (h, w) = (s[2], s[3]);
    let f = flow.reshape(&[clip.batch, clip.frames - 1, 2, h, w]).pad_axis(1, 0, 1);
    let k: Vec<T> = keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect();
    let f = f * ctx.constant(Array::from_vec(&[clip.batch, 1, 1, 1, 1], k));
    f.reshape(&[clip.n(), 2, h, w])
}

/// `L_simple + α·L_bce` (the BCE term only when the batch has seg targets).
pub fn diffusion_losses<'g, T: Scalar>(ctx: &Ctx<'g, T>, nets: &Networks, batch: &DiffusionBatch, alpha: f32) -> Losses<'g, T> {
    let c = |a: &Array<f32>| ctx.constant(a.cast::<T>());
    let app = nets.denoiser.app.embed(ctx, c(&batch.refs), &batch.keep_image);
    let input = UNetInput { z: c(&batch.z), masked: c(&batch.masked), bbox: c(&batch.bbox), steps: batch.steps.clone(), app, clip: batch.clip };
    let hint = batch.control.as_ref().map(|cb| {
        let flow = match &cb.flow {
            FlowHint::Given(f) => c(f),
            FlowHint::Complete { x, flow, keep } => {
                let fc = Clip { batch: batch.clip.batch, frames: batch.clip.frames - 1 };
                let completed = nets.wfcn.forward(ctx, c(x), c(flow), fc);
                let scaled = completed.scale(T::from_f64(1.0 / nets.wfcn.flow_scale as f64));
                pad_flow(ctx, scaled, batch.clip, keep)
            }
        };
        Var::concat(&[flow, c(&cb.mask)], 1)
    });
    let out = nets.denoiser.forward(ctx, &input, hint, true);
    let simple = out.eps.mse(c(&batch.noise));
    match &batch.seg_target {
        Some(target) => {
            let logits = nets.denoiser.seg.forward(ctx, out.seg_feature, out.temb);
            let bce = logits.bce_with_logits_mean(&target.cast::<T>());
            let total = simple + bce.scale(T::from_f64(alpha as f64));
            Losses { total, simple, bce: Some(bce) }
        }
        None => Losses { total: simple, simple, bce: None },
    }
}

/// MSE of the completed flow against the target over a batch.
pub fn wfcn_loss<'g, T: Scalar>(ctx: &Ctx<'g, T>, net: &Wfcn, samples: &[&WfcnSample]) -> Result<Var<'g, T>> {
    let inputs: Vec<&WfcnInput> = samples.iter().map(|s| &s.input).collect();
    let (x, flow, clip) = stack_inputs::<T>(&inputs, net.flow_scale)?;
    let target_inputs: Vec<WfcnInput> =
        samples.iter().map(|s| WfcnInput { flow: s.target.clone(), ..s.input.clone() }).collect();
    let target_refs: Vec<&WfcnInput> = target_inputs.iter().collect();
    let (_, target, _) = stack_inputs::<T>(&target_refs, net.flow_scale)?;
    let out = net.forward(ctx, ctx.constant(x), ctx.constant(flow), clip);
    Ok(out.mse(ctx.constant(target)))
}

/// One row of a loss curve.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub simple: f64,
    pub bce: f64,
}

/// Optimiser and divergence state carried across steps (and checkpoints).
#[derive(Clone, Debug, PartialEq)]
pub struct StageState {
    pub stage: Stage,
    /// Next step to run.
    pub step: usize,
    pub adam: Adam,
    pub initial_loss: Option<f64>,
    pub over: usize,
}

impl StageState {
    pub fn new(stage: Stage, lr: f32) -> Self {
        Self { stage, step: 0, adam: Adam::new(lr), initial_loss: None, over: 0 }
    }
}

/// Training driver over an in-memory dataset.
pub struct Trainer<'a> {
    pub cfg: &'a RunConfig,
    pub nets: Networks,
    pub schedule: NoiseSchedule,
    pub data: &'a [GeneratedVideo],
    /// Where checkpoints and loss curves go; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, data: &'a [GeneratedVideo]) -> Self {
        Self { cfg, nets: Networks::new(cfg), schedule: NoiseSchedule::default(), data, out_dir: None }
    }

    pub fn with_out_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    /// Prepare the store for a fresh stage (the control branch starts as a
    /// copy of the trained UNet encoder).
    pub fn begin_stage(&self, stage: Stage, store: &mut ParamStore<f32>) -> StageState {
        if stage == Stage::Two {
            copy_encoder_to_control(store);
        }
        let lr = if stage == Stage::Wfcn { self.cfg.train.wfcn_lr } else { self.cfg.train.lr };
        StageState::new(stage, lr)
    }

    /// One optimisation step; returns its loss record.
    pub fn step(&self, state: &mut StageState, store: &mut ParamStore<f32>) -> Result<LossRecord> {
        let mut rng = step_rng(self.cfg.train.seed, state.stage, state.step);
        let (record, grads) = {
            let g = Graph::<f32>::new();
            let ctx = Ctx::new(&g, store, state.stage.trainable());
            let (total, simple, bce) = if state.stage == Stage::Wfcn {
                let samples = (0..self.cfg.train.wfcn_batch_size)
                    .map(|_| {
                        let gv = &self.data[rng.gen_range(0..self.data.len())];
                        draw_wfcn_sample(gv, &self.cfg.jfsa.to_jfsa(), self.cfg.sample.warp_threshold, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&WfcnSample> = samples.iter().collect();
                let loss = wfcn_loss(&ctx, &self.nets.wfcn, &refs)?;
                (loss, loss, None)
            } else {
                let builder = BatchBuilder { cfg: self.cfg, schedule: &self.schedule };
                let batch = builder.build(state.stage, self.data, self.cfg.train.batch_size, &mut rng)?;
                let l = diffusion_losses(&ctx, &self.nets, &batch, self.cfg.train.alpha);
                (l.total, l.simple, l.bce)
            };
            let record = LossRecord {
                step: state.step,
                loss: total.item() as f64,
                simple: simple.item() as f64,
                bce: bce.map_or(0.0, |b| b.item() as f64),
            };
            if !record.loss.is_finite() {
                return Err(Error::NonFinite(format!("{} loss at step {}", state.stage, state.step)));
            }
            let mut grads = g.backward(total);
            (record, ctx.param_grads(&mut grads))
        };
        state.adam.update(store, &grads);
        let initial = *state.initial_loss.get_or_insert(record.loss);
        if record.loss > DIVERGENCE_FACTOR * initial {
            state.over += 1;
            if state.over >= DIVERGENCE_WINDOW {
                return Err(Error::Diverged { step: state.step, loss: record.loss, initial, window: DIVERGENCE_WINDOW });
            }
        } else {
            state.over = 0;
        }
        state.step += 1;
        Ok(record)
    }

    /// Run until `state.step == until`, writing the loss curve and
    /// checkpoints when an output directory is set.
    pub fn run(&self, state: &mut StageState, store: &mut ParamStore<f32>, until: usize, mut progress: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        let mut curve = Vec::with_capacity(until.saturating_sub(state.step));
        let mut csv = match &self.out_dir {
            Some(dir) => Some(LossCsv::open(&dir.join(state.stage.dir_name()), state.step)?),
            None => None,
        };
        while state.step < until {
            let rec = self.step(state, store)?;
            if let Some(csv) = csv.as_mut() {
                csv.append(&rec)?;
            }
            progress(&rec);
            curve.push(rec);
            let every = self.cfg.train.checkpoint_every;
            if self.out_dir.is_some() && state.step < until && every > 0 && state.step % every == 0 {
                self.save(state, store)?;
            }
        }
        if self.out_dir.is_some() {
            self.save(state, store)?;
        }
        Ok(curve)
    }

    /// Run a whole stage from scratch with the configured step count.
    pub fn run_stage(&self, stage: Stage, store: &mut ParamStore<f32>, progress: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        let mut state = self.begin_stage(stage, store);
        self.run(&mut state, store, stage.steps(&self.cfg.train), progress)
    }

    pub fn checkpoint_path(dir: &Path, stage: Stage, step: usize) -> PathBuf {
        dir.join(stage.dir_name()).join(format!("step_{step}.ckpt"))
    }

    fn save(&self, state: &StageState, store: &ParamStore<f32>) -> Result<PathBuf> {
        let dir = self.out_dir.as_ref().expect("output directory");
        let path = Self::checkpoint_path(dir, state.stage, state.step);
        save_checkpoint(&path, self.cfg, state, store)?;
        Ok(path)
    }
}

const ADAM_PREFIX: &str = "optim/";

/// Write parameters, optimiser moments and stage bookkeeping.
pub fn save_checkpoint(path: &Path, cfg: &RunConfig, state: &StageState, store: &ParamStore<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut arrays = store.clone();
    for (k, v) in state.adam.state_arrays().iter() {
        arrays.insert(format!("{ADAM_PREFIX}{k}"), v.clone());
    }
    let mut ck = Checkpoint::new(cfg.architecture_hash(), arrays);
    let meta: BTreeMap<String, String> = [
        ("stage", state.stage.id().to_string()),
        ("step", state.step.to_string()),
        ("adam_step", state.adam.step.to_string()),
        ("lr", state.adam.lr.to_string()),
        ("initial_loss", state.initial_loss.map_or(String::new(), |l| format!("{l:e}"))),
        ("over", state.over.to_string()),
        ("flow_fill", "zero".to_string()),
        ("config", cfg.to_toml_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    ck.meta = meta;
    Ok(ck.save(path)?)
}

/// Parameters plus, when the file holds one, the resumable stage state.
pub struct LoadedCheckpoint {
    pub store: ParamStore<f32>,
    pub state: Option<StageState>,
    /// Full run configuration the checkpoint was written with (TOML).
    pub config: Option<String>,
}

/// Load a checkpoint, refusing one written for a different architecture.
pub fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<LoadedCheckpoint> {
    let ck = Checkpoint::load_expecting(path, &cfg.architecture_hash())?;
    let mut store = ParamStore::new();
    let mut optim = ParamStore::new();
    for (k, v) in ck.arrays.iter() {
        match k.strip_prefix(ADAM_PREFIX) {
            Some(rest) => optim.insert(rest.to_string(), v.clone()),
            None => store.insert(k.clone(), v.clone()),
        }
    }
    let get = |k: &str| ck.meta.get(k).cloned();
    let state = (|| {
        let stage = Stage::from_id(get("stage")?.parse().ok()?)?;
        let step = get("step")?.parse().ok()?;
        let adam_step = get("adam_step")?.parse().ok()?;
        let lr = get("lr")?.parse().ok()?;
        let initial_loss = get("initial_loss").and_then(|s| s.parse().ok());
        let over = get("over")?.parse().ok()?;
        Some(StageState { stage, step, adam: Adam::from_state_arrays(lr, adam_step, &optim), initial_loss, over })
    })();
    Ok(LoadedCheckpoint { store, state, config: get("config") })
}

/// Run configuration recorded in a checkpoint.
pub fn checkpoint_config(path: &Path) -> Result<RunConfig> {
    let ck = Checkpoint::load(path)?;
    let toml = ck.meta.get("config").ok_or_else(|| Error::Config(format!("{} records no configuration", path.display())))?;
    RunConfig::from_toml_str(toml)
}

/// Most recent `step_N.ckpt` in a stage directory.
pub fn latest_checkpoint(dir: &Path, stage: Stage) -> Option<PathBuf> {
    let d = dir.join(stage.dir_name());
    fs::read_dir(&d)
        .ok()?
        .filter_map(|e| {
            let p = e.ok()?.path();
            let n: usize = p.file_name()?.to_str()?.strip_prefix("step_")?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((n, p))
        })
        .max_by_key(|(n, _)| *n)
        .map(|(_, p)| p)
}

/// Rows of a stage's `loss.csv`.
pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let parse = |i: usize| f.get(i).and_then(|v| v.parse::<f64>().ok());
            match (f.first().and_then(|v| v.parse().ok()), parse(1), parse(2), parse(3)) {
                (Some(step), Some(loss), Some(simple), Some(bce)) => Ok(LossRecord { step, loss, simple, bce }),
                _ => Err(Error::Config(format!("{}: malformed row {line:?}", path.display()))),
            }
        })
        .collect()
}

/// `loss.csv` of a stage, truncated to the rows before the resume step.
struct LossCsv {
    file: fs::File,
}

impl LossCsv {
    fn open(dir: &Path, from_step: usize) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("loss.csv");
        let mut kept = String::from("step,loss,l_simple,l_bce\n");
        if let Ok(old) = fs::read_to_string(&path) {
            for line in old.lines().skip(1) {
                let step: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s < from_step) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
        fs::write(&path, kept).map_err(|e| Error::io(&path, e))?;
        let file = fs::OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { file })
    }

    fn append(&mut self, r: &LossRecord) -> Result<()> {
        writeln!(self.file, "{},{:e},{:e},{:e}", r.step, r.loss, r.simple, r.bce).map_err(|e| Error::io(Path::new("loss.csv"), e))
    }
}

/// Moving average with the given window (shorter at the start).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}
