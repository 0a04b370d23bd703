//! Central finite differences, the gradient oracle used by tests and the
//! `gradcheck` command. Uses only forward evaluation, never the backward
//! pass it is checking.

use super::{DiffError, Tensor};

/// Per-element central difference (f(x+h e_i) - f(x-h e_i)) / 2h.
///
/// `x` must be a leaf; its values are perturbed in place and restored, and
/// `f` is expected to re-evaluate the scalar of interest from the current
/// leaf values (rebuilding its compute graph each call).
pub fn finite_difference(
    x: &Tensor,
    h: f64,
    mut f: impl FnMut() -> f64,
) -> Result<Vec<f64>, DiffError> {
    assert!(h > 0.0, "finite_difference step must be positive");
    let n = x.numel();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let original = x.values()[i];
        x.update_data(|d| d[i] = original + h);
        let plus = f();
        x.update_data(|d| d[i] = original - h);
        let minus = f();
        x.update_data(|d| d[i] = original);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(DiffError::NonFinite("finite_difference"));
        }
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Worst relative error between analytic and reference gradients. Elements
/// in the small-magnitude regime are compared absolutely: any pair within
/// `1e-7` of each other counts as matching, which is what makes the check
/// meaningful for elements near the `1e-8` scale where central differences
/// are dominated by cancellation noise.
pub fn max_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| {
            let gap = (a - r).abs();
            if gap < 1e-7 {
                0.0
            } else {
                gap / a.abs().max(r.abs())
            }
        })
        .fold(0.0, f64::max)
}
