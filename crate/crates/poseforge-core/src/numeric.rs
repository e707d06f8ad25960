//! Shared numerical helpers: central finite differences and the error
//! metric used by every gradient check in the crate and the CLI.

use alloc::vec::Vec;

/// Central finite-difference gradient of a scalar function at `x`.
///
/// Evaluates `f` at `x ± step·eᵢ` for each coordinate; `f` must be pure.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    step: f64,
) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe: Vec<f64> = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        grad.push((hi - lo) / (2.0 * step));
    }
    grad
}

/// Maximum entrywise deviation between two vectors, normalized by the
/// largest magnitude present in either (with a 1e-12 floor so all-zero
/// pairs compare equal).
///
/// This is scale-free for the dominant entries and treats small entries
/// with an absolute tolerance relative to that dominant scale — the
/// convention every "relative error" gradient tolerance in this crate
/// refers to.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch in error comparison");
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(1e-12f64, |acc, v| acc.max(v.abs()));
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
        / scale
}
