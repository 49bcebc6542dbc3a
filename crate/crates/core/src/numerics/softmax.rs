use crate::error::{Error, Result};

use super::Matrix;

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be finite and positive, got {lambda}"
        )));
    }
    Ok(())
}

/// Shifted log-sum-exp of `z / lambda`, returning `(max, log Σ exp(z/λ - max))`.
fn shifted_lse(row: &[f64], lambda: f64) -> Result<(f64, f64)> {
    let max = row
        .iter()
        .map(|z| z / lambda)
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::InvalidInput(format!(
            "logits scaled by 1/{lambda} are not finite"
        )));
    }
    let sum: f64 = row.iter().map(|z| (z / lambda - max).exp()).sum();
    Ok((max, sum.ln()))
}

/// Temperature softmax of one row.
pub fn softmax_row(row: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    let (max, _) = shifted_lse(row, lambda)?;
    let mut out: Vec<f64> = row.iter().map(|z| (z / lambda - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

/// Temperature log-softmax of one row via shifted log-sum-exp.
pub fn log_softmax_row(row: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    let (max, log_sum) = shifted_lse(row, lambda)?;
    Ok(row.iter().map(|z| z / lambda - max - log_sum).collect())
}

/// Log-softmax restricted to the entries whose index is not `skip`.
///
/// Entry `skip` of the output is set to 0 and must be ignored by callers.
pub fn log_softmax_row_excluding(row: &[f64], lambda: f64, skip: usize) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    let rest: Vec<f64> = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != skip)
        .map(|(_, &z)| z)
        .collect();
    if rest.is_empty() {
        return Err(Error::InvalidInput(
            "need at least one entry besides the excluded index".into(),
        ));
    }
    let (max, log_sum) = shifted_lse(&rest, lambda)?;
    Ok(row
        .iter()
        .enumerate()
        .map(|(i, z)| {
            if i == skip {
                0.0
            } else {
                z / lambda - max - log_sum
            }
        })
        .collect())
}

/// Row-wise `softmax(z / lambda)`.
pub fn softmax_temp(logits: &Matrix, lambda: f64) -> Result<Matrix> {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        out.row_mut(r)
            .copy_from_slice(&softmax_row(logits.row(r), lambda)?);
    }
    Ok(out)
}

/// Row-wise `log softmax(z / lambda)`.
pub fn log_softmax_temp(logits: &Matrix, lambda: f64) -> Result<Matrix> {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        out.row_mut(r)
            .copy_from_slice(&log_softmax_row(logits.row(r), lambda)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn closed_forms() {
        let p = softmax_temp(&m(&[&[0.0, 0.0]]), 1.0).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);

        let p = softmax_temp(&m(&[&[2f64.ln(), 0.0]]), 1.0).unwrap();
        assert!((p.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);

        // e/(e+1) = 0.7310585786300049
        let p = softmax_temp(&m(&[&[2.0, 0.0]]), 2.0).unwrap();
        assert!((p.get(0, 0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((p.get(0, 1) - 0.268_941_421_369_995_1).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_is_stable() {
        let l = log_softmax_temp(&m(&[&[0.0, 0.0]]), 1.0).unwrap();
        assert!((l.get(0, 0) + 2f64.ln()).abs() < 1e-15);

        let l = log_softmax_temp(&m(&[&[1000.0, 0.0]]), 1.0).unwrap();
        assert!(l.get(0, 0).abs() < 1e-12);
        assert!((l.get(0, 1) + 1000.0).abs() < 1e-9);

        let z = m(&[&[1.0, 2.0, 3.0]]);
        let l = log_softmax_temp(&z, 1.0).unwrap();
        let p = softmax_temp(&z, 1.0).unwrap();
        for c in 0..3 {
            assert!((l.get(0, c) - p.get(0, c).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_temperature() {
        let z = m(&[&[1.0, 2.0]]);
        for bad in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                softmax_temp(&z, bad),
                Err(Error::InvalidParameter(_))
            ));
            assert!(matches!(
                log_softmax_temp(&z, bad),
                Err(Error::InvalidParameter(_))
            ));
        }
        assert!(matches!(
            softmax_temp(&m(&[&[1e300, 0.0]]), 1e-300),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn excluding_matches_renormalized_probs() {
        let z = [0.3, -1.2, 2.0, 0.7];
        let p = softmax_row(&z, 1.5).unwrap();
        let l = log_softmax_row_excluding(&z, 1.5, 2).unwrap();
        for i in [0, 1, 3] {
            assert!((l[i].exp() - p[i] / (1.0 - p[2])).abs() < 1e-14);
        }
    }

    fn logits_strategy() -> impl Strategy<Value = (Vec<f64>, f64)> {
        (1usize..12, -6i32..=3).prop_flat_map(|(c, exp)| {
            let scale = 10f64.powi(exp);
            (
                prop::collection::vec(-1.0f64..1.0, c)
                    .prop_map(move |v| v.into_iter().map(|x| x * scale).collect::<Vec<_>>()),
                prop_oneof![Just(0.5), Just(1.0), Just(2.0), Just(4.0)],
            )
        })
    }

    proptest! {
        #[test]
        fn rows_sum_to_one((z, lambda) in logits_strategy()) {
            let p = softmax_row(&z, lambda).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn temperature_is_logit_scaling((z, lambda) in logits_strategy()) {
            let a = softmax_row(&z, lambda).unwrap();
            let scaled: Vec<f64> = z.iter().map(|v| v / lambda).collect();
            let b = softmax_row(&scaled, 1.0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn shift_invariant((z, lambda) in logits_strategy(), shift in -50.0f64..50.0) {
            let a = softmax_row(&z, lambda).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let b = softmax_row(&shifted, lambda).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn exp_log_softmax_is_softmax((z, lambda) in logits_strategy()) {
            let p = softmax_row(&z, lambda).unwrap();
            let l = log_softmax_row(&z, lambda).unwrap();
            for (x, y) in p.iter().zip(&l) {
                prop_assert!((x - y.exp()).abs() < 1e-12);
            }
        }
    }
}
