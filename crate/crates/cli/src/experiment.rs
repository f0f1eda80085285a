//! The scaled-down end-to-end experiment: synthetic data, flow-completion
//! pretraining, the three training stages and the held-out edit
//! evaluation. Checkpoints go to a work directory; a stage whose final
//! checkpoint was written with the same configuration is loaded instead of
//! retrained (training is deterministic, so the result is identical).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vase_autograd::ParamStore;
use vase_core::jfsa::{auto_lambda, cluster_flow};
use vase_core::metrics::{miou, warping_error};
use vase_core::synth::{make_sample, GeneratedVideo};
use vase_core::{Mask, VideoClip};
use vase_models::config::{DataConfig, RunConfig};
use vase_models::data::{heldout_set, training_set};
use vase_models::eval::temporal_feature_consistency;
use vase_models::sampler::{EditOutput, EditRequest, Editor, SampleOptions};
use vase_models::trainer::{
    draw_wfcn_sample, flow_errors, load_checkpoint, read_loss_csv, LossRecord, Networks, Stage, Trainer, WfcnSample,
};
use vase_models::wfcn::complete_flow;

use crate::output::{join, write_edit, EditMeta};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    /// Training clips used for flow-completion pretraining.
    pub wfcn_clips: usize,
    /// Held-out samples the flow-completion error is measured on.
    pub wfcn_eval_samples: usize,
    pub shape_edits: usize,
    pub reconstructions: usize,
    /// Shape edits additionally run as two chained batches.
    pub chained: usize,
    pub edit_seed: u64,
    /// Width of the ring around the object that addition edits may grow into.
    pub add_ring: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut run = RunConfig::default();
        run.model.base_width = 16;
        run.train.batch_size = 2;
        run.train.wfcn_steps = 2000;
        run.train.stage1_steps = 1000;
        run.train.stage2_steps = 200;
        run.train.stage3_steps = 800;
        run.train.checkpoint_every = 100;
        run.jfsa.kmeans_restarts = 4;
        Self { run, wfcn_clips: 64, wfcn_eval_samples: 32, shape_edits: 20, reconstructions: 10, chained: 5, edit_seed: 1, add_ring: 4 }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = toml::from_str(&s).with_context(|| format!("parsing {}", path.display()))?;
        cfg.run.validate()?;
        Ok(cfg)
    }

    fn heldout_data(&self) -> DataConfig {
        DataConfig { frames: 2 * self.run.data.frames - 1, ..self.run.data.clone() }
    }
}

/// Flow-completion learning measurements.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WfcnReport {
    pub curve: Vec<LossRecord>,
    /// Held-out flow MSE (all pixels) before and after pretraining.
    pub mse_init: f64,
    pub mse_final: f64,
    /// Held-out MSE inside the corrupted region: corrupted input vs completion.
    pub region_mse_input: f64,
    pub region_mse_completed: f64,
    pub seconds: f64,
    pub cached: bool,
}

impl WfcnReport {
    pub fn reduction(&self) -> f64 {
        1.0 - self.mse_final / self.mse_init
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub curve: Vec<LossRecord>,
    pub seconds: f64,
    pub cached: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditKind {
    Remove,
    Add,
    Reconstruct,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditReport {
    pub id: String,
    pub kind: EditKind,
    /// mIoU of the predicted object against the requested first-frame shape.
    pub miou_frame0: f64,
    /// Per-frame mIoU of the predicted object against the propagated shape.
    pub miou_per_frame: Vec<f64>,
    pub we: f64,
    pub tfc: f64,
    pub tfc_shuffled: f64,
    pub runtime_s: f64,
    /// Every pixel outside the edit box equals the source bit for bit.
    pub background_exact: bool,
    /// Warping error of the seam pair and of every within-batch pair when chained.
    pub seam_we: Option<f64>,
    pub intra_we: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub wfcn: WfcnReport,
    pub stages: Vec<StageReport>,
    pub edits: Vec<EditReport>,
}

impl ExperimentReport {
    fn of_kind<'a>(&'a self, kinds: &'a [EditKind]) -> impl Iterator<Item = &'a EditReport> + 'a {
        self.edits.iter().filter(move |e| kinds.contains(&e.kind))
    }

    fn mean(values: impl Iterator<Item = f64>) -> f64 {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn shape_miou(&self) -> f64 {
        Self::mean(self.of_kind(&[EditKind::Remove, EditKind::Add]).map(|e| e.miou_frame0))
    }

    pub fn reconstruction_miou(&self) -> f64 {
        Self::mean(self.of_kind(&[EditKind::Reconstruct]).map(|e| e.miou_frame0))
    }

    /// Mean object mIoU of the shape edits at the first and the last frame.
    pub fn propagation(&self) -> (f64, f64) {
        let first = Self::mean(self.of_kind(&[EditKind::Remove, EditKind::Add]).map(|e| e.miou_per_frame[0]));
        let last = Self::mean(self.of_kind(&[EditKind::Remove, EditKind::Add]).map(|e| *e.miou_per_frame.last().unwrap()));
        (first, last)
    }

    pub fn background_exact(&self) -> bool {
        self.edits.iter().all(|e| e.background_exact)
    }

    /// (max seam WE, median intra-batch WE) over the chained edits.
    pub fn seam(&self) -> Option<(f64, f64)> {
        let seams: Vec<f64> = self.edits.iter().filter_map(|e| e.seam_we).collect();
        let mut intra: Vec<f64> = self.edits.iter().filter(|e| e.seam_we.is_some()).flat_map(|e| e.intra_we.iter().copied()).collect();
        if seams.is_empty() || intra.is_empty() {
            return None;
        }
        intra.sort_by(f64::total_cmp);
        let median = if intra.len() % 2 == 1 { intra[intra.len() / 2] } else { 0.5 * (intra[intra.len() / 2 - 1] + intra[intra.len() / 2]) };
        Some((seams.iter().copied().fold(f64::NEG_INFINITY, f64::max), median))
    }
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[experiment] {}", msg.as_ref());
}

/// Load the stage's final checkpoint if it was written with this exact
/// configuration.
fn cached_stage(cfg: &RunConfig, work: &Path, stage: Stage, steps: usize) -> Result<Option<(ParamStore<f32>, Vec<LossRecord>)>> {
    let path = Trainer::checkpoint_path(work, stage, steps);
    if !path.exists() {
        return Ok(None);
    }
    let loaded = load_checkpoint(&path, cfg)?;
    if loaded.config.as_deref() != Some(cfg.to_toml_string().as_str()) {
        return Ok(None);
    }
    let curve = read_loss_csv(&work.join(stage.dir_name()).join("loss.csv"))?;
    if curve.len() != steps {
        return Ok(None);
    }
    Ok(Some((loaded.store, curve)))
}

fn train_stage(cfg: &RunConfig, data: &[GeneratedVideo], work: &Path, stage: Stage, steps: usize, store: &mut ParamStore<f32>) -> Result<(Vec<LossRecord>, f64, bool)> {
    let start = Instant::now();
    if let Some((cached, curve)) = cached_stage(cfg, work, stage, steps)? {
        log(format!("{stage}: reusing checkpoint at step {steps}"));
        *store = cached;
        return Ok((curve, start.elapsed().as_secs_f64(), true));
    }
    let trainer = Trainer::new(cfg, data).with_out_dir(work);
    let mut state = trainer.begin_stage(stage, store);
    let curve = trainer.run(&mut state, store, steps, |r| {
        if r.step % 50 == 0 {
            log(format!("{stage} step {} loss {:.4} ({:.0}s)", r.step, r.loss, start.elapsed().as_secs_f64()));
        }
    })?;
    Ok((curve, start.elapsed().as_secs_f64(), false))
}

/// Fixed held-out flow-completion samples.
pub fn wfcn_eval_set(cfg: &ExperimentConfig) -> Result<Vec<WfcnSample>> {
    let held = heldout_set(&cfg.run.data, cfg.wfcn_eval_samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.edit_seed ^ 0x5eed);
    Ok(held
        .iter()
        .map(|gv| draw_wfcn_sample(gv, &cfg.run.jfsa.to_jfsa(), cfg.run.sample.warp_threshold, &mut rng))
        .collect::<vase_models::Result<Vec<_>>>()?)
}

/// (all-pixel MSE, corrupted-region MSE) of the completion over a sample set.
pub fn wfcn_errors(nets: &Networks, store: &ParamStore<f32>, samples: &[WfcnSample]) -> Result<(f64, f64)> {
    let (mut all, mut region) = (0.0, 0.0);
    for s in samples {
        let pred = complete_flow(&nets.wfcn, store, &s.input)?;
        let (a, r) = flow_errors(&pred, &s.target, &s.corrupted);
        all += a;
        region += r;
    }
    let n = samples.len() as f64;
    Ok((all / n, region / n))
}

/// Corrupted-input errors of the same samples.
pub fn input_errors(samples: &[WfcnSample]) -> (f64, f64) {
    let (mut all, mut region) = (0.0, 0.0);
    for s in samples {
        let (a, r) = flow_errors(&s.input.flow, &s.target, &s.corrupted);
        all += a;
        region += r;
    }
    let n = samples.len() as f64;
    (all / n, region / n)
}

/// A cluster-region shape edit of the first frame, or `None` when the
/// clustering offers no suitable region.
pub fn shape_edit(gv: &GeneratedVideo, kind: EditKind, cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<Option<Mask>> {
    let m0 = gv.masks.frame(0);
    if kind == EditKind::Reconstruct {
        return Ok(Some(m0));
    }
    let jfsa = cfg.run.jfsa.to_jfsa();
    let n_c = rng.gen_range(jfsa.n_clusters_min..=jfsa.n_clusters_max);
    let lambda = jfsa.lambda_bias.unwrap_or_else(|| auto_lambda(&gv.flow));
    let clustering = cluster_flow(&gv.flow, n_c, lambda, jfsa.kmeans, rng.gen())?;
    let ring = m0.dilate(cfg.add_ring).minus(&m0);
    let candidates: Vec<Mask> = clustering
        .regions
        .regions
        .iter()
        .map(|r| r.frame(0))
        .filter_map(|r| match kind {
            EditKind::Remove => {
                let cut = r.and(&m0);
                let rest = m0.minus(&cut);
                (cut.count() >= 8 && rest.count() >= m0.count() / 3).then_some(rest)
            }
            _ => {
                let grow = r.and(&ring);
                (grow.count() >= 8).then(|| m0.or(&grow))
            }
        })
        .collect();
    if candidates.is_empty() {
        return Ok(None);
    }
    Ok(Some(candidates[rng.gen_range(0..candidates.len())].clone()))
}

fn pair_we(out: &EditOutput, i: usize) -> Result<f64> {
    Ok(warping_error(&out.video.slice(i, 2), &out.completed_flow.slice(i, 1), Some(&out.plan.bbox.slice(i, 2)))?)
}

fn shuffled(clip: &VideoClip, seed: u64) -> VideoClip {
    let mut order: Vec<usize> = (0..clip.frames()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let frames: Vec<VideoClip> = order.iter().map(|&t| clip.slice(t, 1)).collect();
    VideoClip::concat(&frames.iter().collect::<Vec<_>>()).expect("same dims")
}

fn evaluate_edit(
    editor: &Editor,
    id: String,
    kind: EditKind,
    gv: &GeneratedVideo,
    m_ref: Mask,
    chain: bool,
    opts: &SampleOptions,
    out_dir: Option<&Path>,
) -> Result<EditReport> {
    let frames = editor.cfg.data.frames;
    let ref_image = make_sample(gv, 0)?.ref_image;
    let full = EditRequest { source: gv.clip.clone(), masks: gv.masks.clone(), flow: gv.flow.clone(), ref_image, m_ref };
    let start = Instant::now();
    let parts = if chain {
        editor.edit_chained(&full, opts, frames)?
    } else {
        let first = EditRequest {
            source: full.source.slice(0, frames),
            masks: full.masks.slice(0, frames),
            flow: full.flow.slice(0, frames - 1),
            ..full.clone()
        };
        vec![editor.edit(&first, opts)?]
    };
    let runtime_s = start.elapsed().as_secs_f64() / parts.len() as f64;
    let out = &parts[0];
    let miou_per_frame = (0..frames).map(|t| miou(&out.pred_masks.frame(t), &out.plan.structure.frame(t))).collect::<vase_core::Result<Vec<_>>>()?;
    // checked on the stitched video: a seam frame is the previous batch's
    // output frame, so its editable box is the previous batch's
    let joined = join(&parts)?;
    let background_exact = (0..joined.video.frames()).all(|t| {
        let (a, b) = (joined.video.frame(t), full.source.frame(t));
        joined.bbox.frame_slice(t).iter().enumerate().all(|(q, &m)| m == 1 || a[q * 3..q * 3 + 3] == b[q * 3..q * 3 + 3])
    });
    let mut intra_we = Vec::new();
    let mut seam_we = None;
    for (i, p) in parts.iter().enumerate() {
        for pair in 0..frames - 1 {
            let we = pair_we(p, pair)?;
            if i > 0 && pair == 0 {
                seam_we = Some(we);
            } else {
                intra_we.push(we);
            }
        }
    }
    let store = &editor.store;
    let app = &editor.nets.denoiser.app;
    let report = EditReport {
        id: id.clone(),
        kind,
        miou_frame0: miou(&out.pred_masks.frame(0), &full.m_ref)?,
        miou_per_frame,
        we: warping_error(&out.video, &out.completed_flow, Some(&out.plan.bbox))?,
        tfc: temporal_feature_consistency(app, store, &out.video)?,
        tfc_shuffled: temporal_feature_consistency(app, store, &shuffled(&out.video, 7))?,
        runtime_s,
        background_exact,
        seam_we,
        intra_we,
    };
    if let Some(dir) = out_dir {
        let s = &opts.scales;
        let meta = EditMeta { source: None, runtime_s, seed: opts.seed, scales: [s.image, s.mask, s.flow], batches: parts.len() };
        let src = full.source.slice(0, parts.len() * (frames - 1) + 1);
        write_edit(&dir.join(&id), &src, &joined, &meta)?;
    }
    Ok(report)
}

/// Run (or resume) every phase and evaluate the held-out edits.
pub fn run(cfg: &ExperimentConfig, work: &Path) -> Result<ExperimentReport> {
    cfg.run.validate()?;
    if cfg.wfcn_clips == 0 || cfg.wfcn_clips > cfg.run.data.clips {
        bail!("wfcn_clips must be in 1..={}", cfg.run.data.clips);
    }
    fs::create_dir_all(work).with_context(|| format!("creating {}", work.display()))?;
    let run = &cfg.run;
    let t = Instant::now();
    let data = training_set(&run.data)?;
    log(format!("generated {} training clips in {:.1}s", data.len(), t.elapsed().as_secs_f64()));

    let nets = Networks::new(run);
    let mut store = nets.init_store(run.train.seed);
    let eval_set = wfcn_eval_set(cfg)?;
    let (mse_init, _) = wfcn_errors(&nets, &store, &eval_set)?;
    let (_, region_mse_input) = input_errors(&eval_set);
    let (curve, seconds, cached) = train_stage(run, &data[..cfg.wfcn_clips], work, Stage::Wfcn, run.train.wfcn_steps, &mut store)?;
    let (mse_final, region_mse_completed) = wfcn_errors(&nets, &store, &eval_set)?;
    let wfcn = WfcnReport { curve, mse_init, mse_final, region_mse_input, region_mse_completed, seconds, cached };
    log(format!("wfcn: held-out MSE {mse_init:.4} -> {mse_final:.4}, region {region_mse_input:.4} -> {region_mse_completed:.4}"));

    let mut stages = Vec::new();
    for (stage, steps) in [(Stage::One, run.train.stage1_steps), (Stage::Two, run.train.stage2_steps), (Stage::Three, run.train.stage3_steps)] {
        let (curve, seconds, cached) = train_stage(run, &data, work, stage, steps, &mut store)?;
        stages.push(StageReport { stage: stage.to_string(), curve, seconds, cached });
    }

    let editor = Editor::new(run.clone(), store);
    let edits = evaluate_edits(cfg, &editor, Some(&work.join("edits")))?;
    let report = ExperimentReport { config: cfg.clone(), wfcn, stages, edits };
    let path = work.join("results.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(report)
}

/// Shape edits (alternating removal and addition) and reconstructions on
/// held-out clips.
pub fn evaluate_edits(cfg: &ExperimentConfig, editor: &Editor, out_dir: Option<&Path>) -> Result<Vec<EditReport>> {
    let pool = cfg.shape_edits * 3 + cfg.reconstructions;
    let held = heldout_set(&cfg.heldout_data(), pool)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.edit_seed);
    let opts = SampleOptions::from_config(&cfg.run.sample, cfg.edit_seed);
    let mut reports = Vec::new();
    let mut next = 0;
    let mut shape = 0;
    while shape < cfg.shape_edits {
        let Some(gv) = held.get(next) else { bail!("held-out pool exhausted after {shape} shape edits") };
        next += 1;
        let kind = if shape % 2 == 0 { EditKind::Remove } else { EditKind::Add };
        let Some(m_ref) = shape_edit(gv, kind, cfg, &mut rng)? else { continue };
        let id = format!("edit_{shape:02}_{}", if kind == EditKind::Remove { "remove" } else { "add" });
        let t = Instant::now();
        let r = evaluate_edit(editor, id, kind, gv, m_ref, shape < cfg.chained, &opts, out_dir)?;
        log(format!("{}: mIoU0 {:.3} mIoU_last {:.3} ({:.0}s)", r.id, r.miou_frame0, r.miou_per_frame.last().unwrap(), t.elapsed().as_secs_f64()));
        reports.push(r);
        shape += 1;
    }
    for i in 0..cfg.reconstructions {
        let Some(gv) = held.get(next + i) else { bail!("held-out pool exhausted") };
        let id = format!("recon_{i:02}");
        let r = evaluate_edit(editor, id, EditKind::Reconstruct, gv, gv.masks.frame(0), false, &opts, out_dir)?;
        log(format!("{}: mIoU0 {:.3}", r.id, r.miou_frame0));
        reports.push(r);
    }
    Ok(reports)
}

/// Default work directory used by the acceptance suite.
pub fn default_work_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/experiment")
}

/// Human-readable digest of the measurements.
pub fn summary(r: &ExperimentReport) -> String {
    let mut s = String::new();
    let w = &r.wfcn;
    s += &format!(
        "flow completion: held-out MSE {:.5} -> {:.5} ({:.1}% reduction); region MSE input {:.5}, completed {:.5}\n",
        w.mse_init,
        w.mse_final,
        100.0 * w.reduction(),
        w.region_mse_input,
        w.region_mse_completed
    );
    for st in &r.stages {
        let first = st.curve.first().map_or(f64::NAN, |c| c.loss);
        let tail: Vec<f64> = st.curve.iter().rev().take(50).map(|c| c.loss).collect();
        let last = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
        s += &format!("{}: {} steps, loss {first:.4} -> {last:.4} (last-50 mean), {:.0}s\n", st.stage, st.curve.len(), st.seconds);
    }
    let (first, last) = r.propagation();
    s += &format!("shape edits: first-frame mIoU {:.3}; reconstruction mIoU {:.3}\n", r.shape_miou(), r.reconstruction_miou());
    s += &format!("propagation: mIoU at first frame {first:.3}, last frame {last:.3}\n");
    if let Some((seam, median)) = r.seam() {
        s += &format!("chaining: max seam WE {seam:.5}, median intra-batch WE {median:.5}\n");
    }
    s += &format!("background outside the edit box bit-exact: {}\n", r.background_exact());
    s
}
