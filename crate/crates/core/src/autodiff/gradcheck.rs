//! Central-difference gradient oracle.
//!
//! Only forward evaluations are used here, so the check stays independent
//! of the backward rules it audits.

use crate::autodiff::Tensor;

/// Central difference `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every entry
/// of `inputs[which]`.
pub fn numeric_gradient<F>(f: F, inputs: &[Tensor], which: usize, h: f64) -> Vec<f64>
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut work = inputs.to_vec();
    let n = work[which].numel();
    (0..n)
        .map(|i| {
            let orig = work[which].values()[i];
            work[which].values_mut()[i] = orig + h;
            let up = f(&work);
            work[which].values_mut()[i] = orig - h;
            let down = f(&work);
            work[which].values_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error with an absolute floor so that near-zero gradients are
/// compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest elementwise [`relative_error`] between two gradient vectors.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}
