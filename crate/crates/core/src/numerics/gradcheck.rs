//! Central finite differences, independent of the tape.

use super::tensor::Tensor;

/// Below this magnitude gradients are compared absolutely rather than
/// relatively; a zero analytic gradient cannot have a finite relative error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Numerical gradient of `f` with respect to every element of every input.
pub fn central_difference<F>(inputs: &[Tensor<f64>], h: f64, mut f: F) -> Vec<Tensor<f64>>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].shape());
        for i in 0..inputs[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let plus = f(&work);
            work[t].data_mut()[i] = orig - h;
            let minus = f(&work);
            work[t].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm over a whole tensor.
/// Per-element ratios are dominated by difference noise wherever one entry
/// is orders of magnitude smaller than its neighbours.
pub fn tensor_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    tensor_error_with_floor(analytic, numeric, RELATIVE_FLOOR)
}

/// As [`tensor_relative_error`] with the denominator floored at `floor`.
pub fn tensor_error_with_floor(analytic: &Tensor<f64>, numeric: &Tensor<f64>, floor: f64) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.norm().max(numeric.norm()).max(floor);
    diff / scale
}

/// Worst per-tensor relative error between two gradient lists.
pub fn worst_relative_error(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| tensor_relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Worst per-element relative error, for small hand-sized checks.
pub fn worst_elementwise_error(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
