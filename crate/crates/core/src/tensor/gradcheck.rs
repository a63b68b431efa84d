//! Central finite differences, the independent oracle for every backward
//! rule in this crate.

use super::Value;

/// Numerically differentiate `eval` with respect to the data of leaf `x`
/// using central differences with step `h` (1e-5 is a good default).
///
/// `eval` must rebuild its computation from `x`'s current data on every call
/// and be deterministic. The leaf data is perturbed in place and restored.
pub fn finite_difference_gradient<F: FnMut() -> f64>(x: &Value, h: f64, mut eval: F) -> Vec<f64> {
    let original = x.to_vec();
    let mut grad = vec![0.0; original.len()];
    for i in 0..original.len() {
        x.set_data_at(i, original[i] + h);
        let plus = eval();
        x.set_data_at(i, original[i] - h);
        let minus = eval();
        x.set_data_at(i, original[i]);
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Largest relative discrepancy between two gradient vectors, with an
/// absolute floor so near-zero entries compare on the floor instead of
/// blowing up.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
