//! Training-stage behaviour on a tiny configuration: initial losses,
//! frozen components, determinism, checkpoint resume and loss curves.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vase_autograd::{Ctx, Graph};
use vase_models::schedule::NoiseSchedule;
use vase_models::trainer::{
    diffusion_losses, latest_checkpoint, load_checkpoint, step_rng, BatchBuilder, Stage, StageState, Trainer,
};

use common::{tiny_config, tiny_data};

#[test]
fn stage_one_initial_loss_is_unit_scale() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let tr = Trainer::new(&cfg, &data);
    let mut store = tr.nets.init_store(0);
    let mut st = tr.begin_stage(Stage::One, &mut store);
    let rec = tr.step(&mut st, &mut store).unwrap();
    assert!((0.5..=2.0).contains(&rec.loss), "initial loss {}", rec.loss);
}

#[test]
fn initial_segmentation_loss_is_near_ln2() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let tr = Trainer::new(&cfg, &data);
    let store = tr.nets.init_store(1);
    let builder = BatchBuilder { cfg: &cfg, schedule: &tr.schedule };
    let batch = builder.build(Stage::Three, &data, 2, &mut step_rng(0, Stage::Three, 0)).unwrap();
    let g = Graph::<f32>::new();
    let ctx = Ctx::new(&g, &store, Stage::Three.trainable());
    let bce = diffusion_losses(&ctx, &tr.nets, &batch, cfg.train.alpha).bce.unwrap().item() as f64;
    assert!((0.5..=0.9).contains(&bce), "initial bce {bce}");
}

#[test]
fn zero_alpha_gives_zero_segmentation_gradient() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let tr = Trainer::new(&cfg, &data);
    let store = tr.nets.init_store(2);
    let builder = BatchBuilder { cfg: &cfg, schedule: &tr.schedule };
    let batch = builder.build(Stage::Three, &data, 2, &mut step_rng(0, Stage::Three, 3)).unwrap();
    let grads_for = |alpha: f32| {
        let g = Graph::<f32>::new();
        let ctx = Ctx::new(&g, &store, Stage::Three.trainable());
        let l = diffusion_losses(&ctx, &tr.nets, &batch, alpha);
        let mut gr = g.backward(l.total);
        ctx.param_grads(&mut gr)
    };
    let zero = grads_for(0.0);
    let seg: Vec<_> = zero.iter().filter(|(k, _)| k.starts_with("seg.")).collect();
    assert!(!seg.is_empty());
    for (k, v) in seg {
        assert!(v.data().iter().all(|&x| x == 0.0), "{k} has gradient with alpha = 0");
    }
    let nonzero = grads_for(0.05);
    assert!(nonzero.iter().filter(|(k, _)| k.starts_with("seg.")).any(|(_, v)| v.data().iter().any(|&x| x != 0.0)));
}

#[test]
fn stage_two_only_moves_the_control_branch() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let tr = Trainer::new(&cfg, &data);
    let mut store = tr.nets.init_store(3);
    let mut st = tr.begin_stage(Stage::Two, &mut store);
    let before: Vec<String> = Stage::Two.frozen_prefixes().iter().map(|p| store.hash_prefix(p)).collect();
    let ctrl = store.hash_prefix("ctrl.");
    tr.run(&mut st, &mut store, 2, |_| {}).unwrap();
    let after: Vec<String> = Stage::Two.frozen_prefixes().iter().map(|p| store.hash_prefix(p)).collect();
    assert_eq!(before, after);
    assert_ne!(ctrl, store.hash_prefix("ctrl."));
}

#[test]
fn stage_three_batches_contain_augmentations_and_clean_frames() {
    let mut cfg = tiny_config();
    cfg.jfsa.p_augm = 1.0;
    cfg.train.p_clean = 0.0;
    let data = tiny_data(&cfg);
    let schedule = NoiseSchedule::default();
    let builder = BatchBuilder { cfg: &cfg, schedule: &schedule };
    let b = builder.build(Stage::Three, &data, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(b.augmented, 4);
    assert_eq!(b.clean, 0);
    cfg.train.p_clean = 1.0;
    let builder = BatchBuilder { cfg: &cfg, schedule: &schedule };
    let b = builder.build(Stage::Three, &data, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!((b.augmented, b.clean), (0, 4));
    // a clean first frame has no box and shows the target pixels
    let hw = 32 * 32;
    assert!(b.bbox.data()[..hw].iter().all(|&v| v == 0.0));
}

#[test]
fn identical_seeds_reproduce_curves_and_parameters() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let run = || {
        let tr = Trainer::new(&cfg, &data);
        let mut store = tr.nets.init_store(cfg.train.seed);
        let mut curves = Vec::new();
        for stage in [Stage::Wfcn, Stage::One, Stage::Two, Stage::Three] {
            let mut st = tr.begin_stage(stage, &mut store);
            curves.push(tr.run(&mut st, &mut store, 2, |_| {}).unwrap());
        }
        (curves, store.hash_prefix(""))
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let mut cfg = tiny_config();
    cfg.train.checkpoint_every = 3;
    let data = tiny_data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let tr = Trainer::new(&cfg, &data).with_out_dir(dir.path());
    for stage in [Stage::One, Stage::Three] {
        let mut store = tr.nets.init_store(4);
        let mut st = tr.begin_stage(stage, &mut store);
        let full = tr.run(&mut st, &mut store, 6, |_| {}).unwrap();
        let final_hash = store.hash_prefix("");

        let mid = Trainer::checkpoint_path(dir.path(), stage, 3);
        let loaded = load_checkpoint(&mid, &cfg).unwrap();
        let mut resumed_store = loaded.store;
        let mut resumed: StageState = loaded.state.unwrap();
        assert_eq!(resumed.step, 3);
        let tail = tr.run(&mut resumed, &mut resumed_store, 6, |_| {}).unwrap();
        assert_eq!(&full[3..], &tail[..], "{stage}");
        assert_eq!(resumed_store.hash_prefix(""), final_hash, "{stage}");
        assert_eq!(resumed, st);

        let csv = std::fs::read_to_string(dir.path().join(stage.dir_name()).join("loss.csv")).unwrap();
        let steps: Vec<usize> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(steps, (0..6).collect::<Vec<_>>());
        assert_eq!(latest_checkpoint(dir.path(), stage), Some(Trainer::checkpoint_path(dir.path(), stage, 6)));
    }
}

#[test]
fn checkpoint_for_other_architecture_is_rejected() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let tr = Trainer::new(&cfg, &data).with_out_dir(dir.path());
    let mut store = tr.nets.init_store(0);
    let mut st = tr.begin_stage(Stage::Wfcn, &mut store);
    tr.run(&mut st, &mut store, 1, |_| {}).unwrap();
    let mut other = cfg.clone();
    other.model.base_width = 8;
    let path = Trainer::checkpoint_path(dir.path(), Stage::Wfcn, 1);
    assert!(load_checkpoint(&path, &cfg).is_ok());
    assert!(load_checkpoint(&path, &other).is_err());
}

#[test]
fn run_without_output_dir_skips_checkpoints() {
    let mut cfg = tiny_config();
    cfg.train.checkpoint_every = 2;
    let data = tiny_data(&cfg);
    let tr = Trainer::new(&cfg, &data);
    let mut store = tr.nets.init_store(5);
    let mut st = tr.begin_stage(Stage::One, &mut store);
    let curve = tr.run(&mut st, &mut store, 5, |_| {}).unwrap();
    assert_eq!(curve.len(), 5);
}
