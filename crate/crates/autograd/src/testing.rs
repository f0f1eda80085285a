//! Finite-difference oracle for gradient checks (used by tests across the
//! workspace). Independent of the reverse-mode machinery: it only evaluates
//! the forward function.

use crate::array::Array;
use crate::store::ParamStore;

/// Central difference `(f(p + h e_i) - f(p - h e_i)) / 2h` for element
/// `index` of parameter `name`.
pub fn central_difference(
    store: &ParamStore<f64>,
    name: &str,
    index: usize,
    h: f64,
    mut f: impl FnMut(&ParamStore<f64>) -> f64,
) -> f64 {
    let mut plus = store.clone();
    plus.get_mut(name).expect("param").data_mut()[index] += h;
    let mut minus = store.clone();
    minus.get_mut(name).expect("param").data_mut()[index] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Same as [`central_difference`] but perturbing an input array.
pub fn central_difference_input(x: &Array<f64>, index: usize, h: f64, mut f: impl FnMut(&Array<f64>) -> f64) -> f64 {
    let mut plus = x.clone();
    plus.data_mut()[index] += h;
    let mut minus = x.clone();
    minus.data_mut()[index] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative error with an absolute floor so near-zero gradients compare sanely.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
