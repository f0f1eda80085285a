//! Command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vase_core::io;
use vase_models::config::RunConfig;
use vase_models::data::{generate_clips, heldout_seed, read_dataset, read_manifest, train_seed, write_dataset};
use vase_models::sampler::{EditRequest, Editor, SampleOptions};
use vase_models::schedule::GuidanceScales;
use vase_models::trainer::{checkpoint_config, latest_checkpoint, load_checkpoint, Networks, Stage, Trainer};

use crate::experiment::{self, ExperimentConfig};
use crate::output::{expand_edit_dirs, join, read_edit, write_edit, EditMeta};
use crate::report::{edit_row, mask_rows, render_csv, summary, write_strip, FeatureModel, MetricRow};

#[derive(Debug, Parser)]
#[command(name = "vase", version, about = "Shape-guided video object editing on synthetic sprite videos")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of sprite videos with masks and flow.
    GenData(GenDataArgs),
    /// Pretrain the flow completion network.
    PretrainWfcn(TrainArgs),
    /// Train one diffusion stage (1: UNet, 2: control branch, 3: joint fine-tuning).
    Train(StageArgs),
    /// Edit a video so its object follows a new first-frame shape.
    Edit(EditArgs),
    /// Compute per-video metrics as CSV.
    Eval(EvalArgs),
    /// Write the CSV report and side-by-side frame strips.
    Report(ReportArgs),
    /// Run the complete scaled-down experiment and print its measurements.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Run configuration (TOML); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Train)]
    pub split: Split,
    /// Number of clips (default: `data.clips` for training, 20 held out).
    #[arg(long)]
    pub clips: Option<usize>,
    /// Frames per clip (default: `data.frames`).
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint root (`<ckpt>/<stage>/step_N.ckpt`).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Continue from the newest checkpoint of this stage.
    #[arg(long)]
    pub resume: bool,
    /// Override the configured number of steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=3))]
    pub stage: u64,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    /// Source frames (PNG directory).
    #[arg(long)]
    pub source: PathBuf,
    /// Source object masks (PNG directory).
    #[arg(long)]
    pub masks: PathBuf,
    /// Source forward flow (`.flo` directory, one file per frame pair).
    #[arg(long)]
    pub flow: PathBuf,
    /// Reference appearance image.
    #[arg(long = "ref")]
    pub ref_image: PathBuf,
    /// Target first-frame shape.
    #[arg(long)]
    pub ref_mask: PathBuf,
    /// Checkpoint root containing a stage-3 checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Guidance scales for image, mask and flow conditioning.
    #[arg(long, value_parser = parse_scales)]
    pub scales: Option<GuidanceScales>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the configured number of DDIM steps.
    #[arg(long)]
    pub ddim_steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("inputs").required(true).args(["edits", "pred"]))]
pub struct EvalArgs {
    /// Edit results (or directories of them) written by `edit`.
    #[arg(long, num_args = 1.., conflicts_with_all = ["pred", "target"])]
    pub edits: Vec<PathBuf>,
    /// Checkpoint root for the temporal feature consistency column.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Predicted mask videos.
    #[arg(long, requires = "target")]
    pub pred: Option<PathBuf>,
    /// Ground-truth mask videos.
    #[arg(long, requires = "pred")]
    pub target: Option<PathBuf>,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub edits: Vec<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment configuration (TOML); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Work directory for checkpoints, edits and `results.json`.
    #[arg(long)]
    pub work: PathBuf,
}

fn parse_scales(s: &str) -> std::result::Result<GuidanceScales, String> {
    let v: Vec<f32> = s.split(',').map(|p| p.trim().parse::<f32>().map_err(|e| format!("{p:?}: {e}"))).collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [image, mask, flow] if v.iter().all(|x| x.is_finite()) => Ok(GuidanceScales { image, mask, flow }),
        _ => Err("expected three comma-separated numbers, e.g. 5,7,6".into()),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::PretrainWfcn(a) => train(Stage::Wfcn, a),
        Command::Train(a) => train(Stage::from_id(a.stage).expect("stage range checked by the parser"), a.train),
        Command::Edit(a) => edit(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Experiment(a) => run_experiment(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut data = cfg.data.clone();
    if let Some(f) = a.frames {
        data.frames = f;
    }
    let count = a.clips.unwrap_or(match a.split {
        Split::Train => data.clips,
        Split::Heldout => 20,
    });
    data.clips = count;
    let base = data.seed;
    let start = Instant::now();
    let clips = match a.split {
        Split::Train => generate_clips(&data.distribution(), count, |i| train_seed(base, i))?,
        Split::Heldout => generate_clips(&data.distribution(), count, |i| heldout_seed(base, i))?,
    };
    write_dataset(&a.out, &data, &clips)?;
    eprintln!("wrote {count} clips to {} in {:.1}s", a.out.display(), start.elapsed().as_secs_f64());
    Ok(())
}

fn train(stage: Stage, a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let manifest = read_manifest(&a.data)?;
    cfg.data = manifest.data;
    if let Some(n) = a.steps {
        match stage {
            Stage::Wfcn => cfg.train.wfcn_steps = n,
            Stage::One => cfg.train.stage1_steps = n,
            Stage::Two => cfg.train.stage2_steps = n,
            Stage::Three => cfg.train.stage3_steps = n,
        }
    }
    cfg.validate()?;
    let data = read_dataset(&a.data)?;
    let trainer = Trainer::new(&cfg, &data).with_out_dir(&a.ckpt);
    let steps = stage.steps(&cfg.train);

    let (mut store, mut state) = match (a.resume, latest_checkpoint(&a.ckpt, stage)) {
        (true, Some(path)) => {
            let loaded = load_checkpoint(&path, &cfg)?;
            let state = loaded.state.with_context(|| format!("{} holds no training state", path.display()))?;
            eprintln!("resuming {stage} from {} (step {})", path.display(), state.step);
            (loaded.store, state)
        }
        _ => {
            let mut store = match previous_stage(stage).and_then(|p| latest_checkpoint(&a.ckpt, p).map(|path| (p, path))) {
                Some((p, path)) => {
                    eprintln!("starting {stage} from {p} checkpoint {}", path.display());
                    load_checkpoint(&path, &cfg)?.store
                }
                None if matches!(stage, Stage::Two | Stage::Three) => {
                    bail!("{stage} needs a {} checkpoint under {}", previous_stage(stage).unwrap(), a.ckpt.display())
                }
                None => Networks::new(&cfg).init_store(cfg.train.seed),
            };
            let state = trainer.begin_stage(stage, &mut store);
            (store, state)
        }
    };
    let start = Instant::now();
    let curve = trainer.run(&mut state, &mut store, steps, |r| {
        if r.step % 50 == 0 {
            eprintln!("{stage} step {} loss {:.5} ({:.0}s)", r.step, r.loss, start.elapsed().as_secs_f64());
        }
    })?;
    if let Some(last) = curve.last() {
        eprintln!("{stage}: {} steps, final loss {:.5}", curve.len(), last.loss);
    }
    println!("{}", Trainer::checkpoint_path(&a.ckpt, stage, steps).display());
    Ok(())
}

fn previous_stage(stage: Stage) -> Option<Stage> {
    match stage {
        Stage::Wfcn => None,
        Stage::One => Some(Stage::Wfcn),
        Stage::Two => Some(Stage::One),
        Stage::Three => Some(Stage::Two),
    }
}

/// Editor from the newest stage-3 checkpoint, configured as it was trained.
pub fn load_editor(ckpt: &Path) -> Result<Editor> {
    let path = latest_checkpoint(ckpt, Stage::Three).with_context(|| format!("no {} checkpoint under {}", Stage::Three, ckpt.display()))?;
    let cfg = checkpoint_config(&path)?;
    let store = load_checkpoint(&path, &cfg)?.store;
    Ok(Editor::new(cfg, store))
}

fn edit(a: EditArgs) -> Result<()> {
    let editor = load_editor(&a.ckpt)?;
    let req = EditRequest {
        source: io::read_clip(&a.source)?,
        masks: io::read_masks(&a.masks)?,
        flow: io::read_flow_dir(&a.flow)?,
        ref_image: io::read_rgb_png(&a.ref_image)?,
        m_ref: io::read_mask_png(&a.ref_mask)?,
    };
    let mut opts = SampleOptions::from_config(&editor.cfg.sample, a.seed);
    if let Some(s) = a.scales {
        opts.scales = s;
    }
    if let Some(n) = a.ddim_steps {
        opts.ddim_steps = n;
    }
    let batch = editor.cfg.data.frames;
    let start = Instant::now();
    let parts = if req.source.frames() > batch { editor.edit_chained(&req, &opts, batch)? } else { vec![editor.edit(&req, &opts)?] };
    let runtime_s = start.elapsed().as_secs_f64();
    let s = opts.scales;
    let meta = EditMeta {
        source: Some(a.source.display().to_string()),
        runtime_s,
        seed: a.seed,
        scales: [s.image, s.mask, s.flow],
        batches: parts.len(),
    };
    write_edit(&a.out, &req.source, &join(&parts)?, &meta)?;
    eprintln!("edited {} frames in {runtime_s:.1}s -> {}", req.source.frames(), a.out.display());
    Ok(())
}

fn edit_rows(dirs: &[PathBuf], ckpt: Option<&Path>) -> Result<Vec<(crate::output::StoredEdit, MetricRow)>> {
    let editor = ckpt.map(load_editor).transpose()?;
    let features = editor.as_ref().map(|e| FeatureModel { encoder: &e.nets.denoiser.app, store: &e.store });
    expand_edit_dirs(dirs)?
        .iter()
        .map(|d| {
            let e = read_edit(d)?;
            let row = edit_row(&e, features.as_ref())?;
            Ok((e, row))
        })
        .collect()
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let rows = match (&a.pred, &a.target) {
        (Some(p), Some(t)) => mask_rows(p, t)?,
        _ => edit_rows(&a.edits, a.ckpt.as_deref())?.into_iter().map(|(_, r)| r).collect(),
    };
    emit(&render_csv(&rows, false), a.out.as_deref())?;
    eprintln!("{}", summary(&rows));
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let edits = edit_rows(&a.edits, a.ckpt.as_deref())?;
    let strips = a.out.join("strips");
    fs::create_dir_all(&strips).with_context(|| format!("creating {}", strips.display()))?;
    for (e, _) in &edits {
        write_strip(&strips.join(format!("{}.png", e.id)), e)?;
    }
    let rows: Vec<MetricRow> = edits.into_iter().map(|(_, r)| r).collect();
    emit(&render_csv(&rows, true), Some(&a.out.join("report.csv")))?;
    println!("{}", summary(&rows));
    Ok(())
}

fn run_experiment(a: ExperimentArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let r = experiment::run(&cfg, &a.work)?;
    println!("{}", experiment::summary(&r));
    Ok(())
}
