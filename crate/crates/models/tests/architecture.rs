//! Initialisation identities of the inflated UNet and the control branch.

mod checks;

use checks::{eps, inflation_identity_diff, inputs, setup, small, zero_control_diff, Inputs};
use vase_autograd::Array;
use vase_models::blocks::Clip;
use vase_models::unet::copy_encoder_to_control;

#[test]
fn fresh_temporal_layers_are_identity() {
    let diff = inflation_identity_diff();
    assert!(diff <= 1e-5, "max abs diff {diff}");
}

#[test]
fn per_frame_model_is_independent_of_neighbours() {
    // the 2D model evaluated on one frame matches the same frame inside a clip
    let cfg = small();
    let (d, store) = setup(&cfg, 3);
    let x = inputs(&cfg, Clip { batch: 1, frames: 3 }, 8, 8, 4);
    let full = eps(&d, &store, &x, false, true);
    let (h, w) = (8, 8);
    let per = 3 * h * w;
    for f in 0..3 {
        let take = |a: &Array<f32>, c: usize| Array::from_vec(&[1, c, h, w], a.data()[f * c * h * w..(f + 1) * c * h * w].to_vec());
        let single = Inputs {
            z: take(&x.z, 3),
            masked: take(&x.masked, 3),
            bbox: take(&x.bbox, 1),
            refs: x.refs.clone(),
            hint: take(&x.hint, 3),
            clip: Clip { batch: 1, frames: 1 },
            steps: x.steps.clone(),
        };
        let one = eps(&d, &store, &single, false, false);
        let slice = Array::from_vec(&[1, 3, h, w], full.data()[f * per..(f + 1) * per].to_vec());
        assert!(one.max_abs_diff(&slice) <= 1e-5, "frame {f}");
    }
}

#[test]
fn zero_initialised_control_leaves_output_unchanged() {
    // also after the control encoder is copied from the UNet
    let (fresh, copied) = zero_control_diff();
    assert!(fresh <= 1e-6 && copied <= 1e-6, "{fresh} {copied}");
}

#[test]
fn control_copy_matches_unet_encoder() {
    let cfg = small();
    let (_, mut store) = setup(&cfg, 7);
    copy_encoder_to_control(&mut store);
    let unet: Vec<&String> = store.names().filter(|k| k.starts_with("unet.enc") || k.starts_with("unet.conv_in")).collect();
    assert!(!unet.is_empty());
    for k in unet {
        let c = format!("ctrl.{}", &k["unet.".len()..]);
        assert_eq!(store.get(k), store.get(&c), "{k}");
    }
}
