//! Reverse-mode gradients of the training losses against central finite
//! differences, in f64 on micro configurations (8×8 frames, two frames).

mod checks;

use checks::{flow_completion_gradients, total_loss_gradients, GRAD_TOL};

#[test]
fn total_loss_gradients_match_finite_differences() {
    let r = total_loss_gradients();
    assert!(r.checked > 30);
    assert!(r.worst <= GRAD_TOL, "worst relative error {:e} at {}", r.worst, r.at);
}

#[test]
fn flow_completion_gradients_match_finite_differences() {
    let r = flow_completion_gradients();
    assert!(r.checked > 10);
    assert!(r.worst <= GRAD_TOL, "worst relative error {:e} at {}", r.worst, r.at);
}
