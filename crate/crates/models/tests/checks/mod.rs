//! Numerical checks shared by the model tests and the acceptance suite:
//! initialisation identities of the denoiser and finite-difference
//! gradient checks on micro configurations.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vase_autograd::testing::{central_difference, rel_err};
use vase_autograd::{Array, Ctx, Graph, ParamStore, Trainable};
use vase_core::{FlowSequence, MaskSequence};
use vase_models::blocks::Clip;
use vase_models::config::{ModelConfig, RunConfig, WfcnConfig};
use vase_models::trainer::{diffusion_losses, wfcn_loss, ControlBatch, DiffusionBatch, FlowHint, Networks, WfcnSample};
use vase_models::unet::{copy_encoder_to_control, Denoiser, UNetInput};
use vase_models::wfcn::{stack_inputs, WfcnInput};

fn randn_array(shape: &[usize], rng: &mut ChaCha8Rng) -> Array<f32> {
    let n = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

pub struct Inputs {
    pub z: Array<f32>,
    pub masked: Array<f32>,
    pub bbox: Array<f32>,
    pub refs: Array<f32>,
    pub hint: Array<f32>,
    pub clip: Clip,
    pub steps: Vec<f64>,
}

pub fn inputs(cfg: &ModelConfig, clip: Clip, h: usize, w: usize, seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = clip.n();
    Inputs {
        z: randn_array(&[n, 3, h, w], &mut rng),
        masked: randn_array(&[n, 3, h, w], &mut rng),
        bbox: Array::from_vec(&[n, 1, h, w], (0..n * h * w).map(|i| (i % 3 == 0) as u8 as f32).collect()),
        refs: randn_array(&[clip.batch, 3, cfg.ref_size, cfg.ref_size], &mut rng),
        hint: randn_array(&[n, 3, h, w], &mut rng),
        clip,
        steps: (0..clip.batch).map(|b| 100.0 + 350.0 * b as f64).collect(),
    }
}

/// Noise prediction of the denoiser for the given options.
pub fn eps(d: &Denoiser, store: &ParamStore<f32>, x: &Inputs, hint: bool, temporal: bool) -> Array<f32> {
    let g = Graph::<f32>::new();
    let ctx = Ctx::new(&g, store, Trainable::Nothing);
    let app = d.app.embed(&ctx, ctx.constant(x.refs.clone()), &vec![true; x.clip.batch]);
    let input = UNetInput {
        z: ctx.constant(x.z.clone()),
        masked: ctx.constant(x.masked.clone()),
        bbox: ctx.constant(x.bbox.clone()),
        steps: x.steps.clone(),
        app,
        clip: x.clip,
    };
    let h = hint.then(|| ctx.constant(x.hint.clone()));
    (*d.forward(&ctx, &input, h, temporal).eps.value()).clone()
}

pub fn setup(cfg: &ModelConfig, seed: u64) -> (Denoiser, ParamStore<f32>) {
    let d = Denoiser::new(cfg);
    let mut store = ParamStore::new();
    d.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    (d, store)
}

pub fn small() -> ModelConfig {
    ModelConfig { base_width: 8, levels: 3, app_dim: 16, ref_size: 16, groups: 4, max_frames: 8, flow_scale: 2.0 }
}

/// Max |ε_inflated − ε_per-frame| of a freshly initialised denoiser.
pub fn inflation_identity_diff() -> f32 {
    let cfg = small();
    let (d, store) = setup(&cfg, 1);
    let x = inputs(&cfg, Clip { batch: 2, frames: 4 }, 16, 24, 2);
    eps(&d, &store, &x, false, true).max_abs_diff(&eps(&d, &store, &x, false, false))
}

/// Max output change caused by a freshly initialised control branch, before
/// and after the branch is copied from the UNet encoder.
pub fn zero_control_diff() -> (f32, f32) {
    let cfg = small();
    let (d, mut store) = setup(&cfg, 5);
    let x = inputs(&cfg, Clip { batch: 2, frames: 3 }, 16, 16, 6);
    let plain = eps(&d, &store, &x, false, true);
    let fresh = plain.max_abs_diff(&eps(&d, &store, &x, true, true));
    copy_encoder_to_control(&mut store);
    (fresh, plain.max_abs_diff(&eps(&d, &store, &x, true, true)))
}

const H: usize = 8;
const W: usize = 8;
const T: usize = 2;
const STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-3;
/// Denominator floor for gradients that are numerically zero.
const FLOOR: f64 = 1e-6;

fn micro_config() -> RunConfig {
    RunConfig {
        model: ModelConfig { base_width: 4, levels: 1, app_dim: 4, ref_size: 8, groups: 2, max_frames: 2, flow_scale: 2.0 },
        wfcn: WfcnConfig { width: 4, levels: 1 },
        ..Default::default()
    }
}

fn randn(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn random_masks(frames: usize, rng: &mut ChaCha8Rng) -> MaskSequence {
    MaskSequence::new(frames, H, W, (0..frames * H * W).map(|_| u8::from(rng.gen_bool(0.4))).collect()).unwrap()
}

fn random_flow(len: usize, rng: &mut ChaCha8Rng) -> FlowSequence {
    FlowSequence::new(len, H, W, randn(len * H * W * 2, rng).iter().map(|v| v * 1.5).collect()).unwrap()
}

/// Every parameter perturbed so zero-initialised layers pass gradient.
fn randomised_store(nets: &Networks, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = nets.init_store(seed).cast::<f64>();
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        for v in store.get_mut(&name).unwrap().data_mut() {
            *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    store
}

/// Worst relative error between analytic and central-difference gradients
/// over three entries of every parameter array.
pub struct GradReport {
    pub worst: f64,
    pub at: String,
    pub checked: usize,
}

fn check_all(store: &ParamStore<f64>, loss: impl Fn(&ParamStore<f64>, bool) -> (f64, Option<std::collections::BTreeMap<String, Array<f64>>>)) -> GradReport {
    let (_, grads) = loss(store, true);
    let grads = grads.unwrap();
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for (name, value) in store.iter() {
        let g = grads.get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
        for idx in [0, value.len() / 2, value.len() - 1] {
            let numeric = central_difference(store, name, idx, STEP, |s| loss(s, false).0);
            let e = rel_err(g.data()[idx], numeric, FLOOR);
            if e > worst.0 {
                worst = (e, format!("{name}[{idx}] analytic {} numeric {numeric}", g.data()[idx]));
            }
            checked += 1;
        }
    }
    GradReport { worst: worst.0, at: worst.1, checked }
}

/// Total diffusion loss (noise MSE plus segmentation BCE) on a micro configuration.
pub fn total_loss_gradients() -> GradReport {
    let cfg = micro_config();
    let nets = Networks::new(&cfg);
    let store = randomised_store(&nets, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = T;
    let input = WfcnInput { warped_region: random_masks(T, &mut rng), flow: random_flow(T - 1, &mut rng), structure: random_masks(T, &mut rng) };
    let (x, flow, _) = stack_inputs::<f32>(&[&input], cfg.model.flow_scale).unwrap();
    let batch = DiffusionBatch {
        clip: Clip { batch: 1, frames: T },
        height: H,
        width: W,
        z: Array::from_vec(&[n, 3, H, W], randn(n * 3 * H * W, &mut rng)),
        noise: Array::from_vec(&[n, 3, H, W], randn(n * 3 * H * W, &mut rng)),
        masked: Array::from_vec(&[n, 3, H, W], randn(n * 3 * H * W, &mut rng)),
        bbox: Array::from_vec(&[n, 1, H, W], random_masks(T, &mut rng).data().iter().map(|&v| v as f32).collect()),
        refs: Array::from_vec(&[1, 3, 8, 8], randn(3 * 64, &mut rng)),
        keep_image: vec![true],
        steps: vec![417.0],
        control: Some(ControlBatch {
            mask: Array::from_vec(&[n, 1, H, W], random_masks(T, &mut rng).data().iter().map(|&v| v as f32).collect()),
            flow: FlowHint::Complete { x, flow, keep: vec![true] },
        }),
        seg_target: Some(Array::from_vec(&[n, 1, H, W], random_masks(T, &mut rng).data().iter().map(|&v| v as f32).collect())),
        augmented: 1,
        clean: 0,
        flags: vec![],
    };
    check_all(&store, |s, want_grads| {
        let g = Graph::<f64>::new();
        let ctx = Ctx::new(&g, s, Trainable::All);
        let l = diffusion_losses(&ctx, &nets, &batch, 0.05);
        assert!(l.bce.is_some());
        let value = l.total.item();
        let grads = want_grads.then(|| {
            let mut gr = g.backward(l.total);
            ctx.param_grads(&mut gr)
        });
        (value, grads)
    })
}

/// Flow completion MSE on a micro configuration.
pub fn flow_completion_gradients() -> GradReport {
    let cfg = micro_config();
    let nets = Networks::new(&cfg);
    let full = randomised_store(&nets, 21);
    let store = full.subset("wfcn.");
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let samples: Vec<WfcnSample> = (0..2)
        .map(|_| WfcnSample {
            input: WfcnInput { warped_region: random_masks(T, &mut rng), flow: random_flow(T - 1, &mut rng), structure: random_masks(T, &mut rng) },
            target: random_flow(T - 1, &mut rng),
            corrupted: random_masks(T, &mut rng),
        })
        .collect();
    let refs: Vec<&WfcnSample> = samples.iter().collect();
    check_all(&store, |s, want_grads| {
        let g = Graph::<f64>::new();
        let ctx = Ctx::new(&g, s, Trainable::All);
        let loss = wfcn_loss(&ctx, &nets.wfcn, &refs).unwrap();
        let value = loss.item();
        let grads = want_grads.then(|| {
            let mut gr = g.backward(loss);
            ctx.param_grads(&mut gr)
        });
        (value, grads)
    })
}
