//! Central finite differences, used as the independent check on every
//! hand-derived gradient.

use crate::error::Result;
use crate::numerics::Matrix;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradient norms below this are compared absolutely rather than relatively.
const NORM_FLOOR: f64 = 1e-4;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn numeric_gradient<F>(f: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let plus = f(&x)?;
        x[i] = point[i] - h;
        let minus = f(&x)?;
        x[i] = point[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Finite-difference gradient of a loss over a logits matrix.
pub fn numeric_gradient_matrix<F>(f: F, logits: &Matrix, h: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> Result<f64>,
{
    let (r, c) = logits.shape();
    let grad = numeric_gradient(
        |x| f(&Matrix::from_vec(r, c, x.to_vec())?),
        logits.data(),
        h,
    )?;
    Matrix::from_vec(r, c, grad)
}

/// `‖a - b‖ / max(‖a‖ + ‖b‖, 1e-4)`.
///
/// The floor keeps vanishing gradients (exact minimizers, degenerate rows)
/// from turning round-off into a large relative error.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / (norm(analytic) + norm(numeric)).max(NORM_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = numeric_gradient(|v| Ok(v[0] * v[0] + 3.0 * v[1]), &[2.0, -1.0], 1e-5).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
        assert!(relative_error(&g, &[4.0, 3.0]) < 1e-9);
        assert!(relative_error(&[1.0, 0.0], &[0.0, 1.0]) > 0.5);
    }
}
