use crate::error::{Error, Result};
use crate::numerics::{log_softmax_row, Matrix};

use super::{check_batch, LabelBatch, LossOutput, PROB_FLOOR};

/// Cross-entropy against (possibly soft) label rows, temperature 1.
///
/// `loss = mean_b[-Σ_i V_i log S_i]`, `grad = (S - V) / B`.
pub fn ce_loss(student_logits: &Matrix, labels: &LabelBatch) -> Result<LossOutput> {
    check_batch(student_logits, labels.values())?;
    let (b, c) = student_logits.shape();
    let mut grad = Matrix::zeros(b, c);
    let mut loss = 0.0;
    let mut clamp_events = 0;
    for r in 0..b {
        let log_s = log_softmax_row(student_logits.row(r), 1.0)?;
        let v = labels.values().row(r);
        let g = grad.row_mut(r);
        for i in 0..c {
            let s = log_s[i].exp();
            if v[i] > 0.0 {
                loss -= v[i] * log_s[i];
                if s < PROB_FLOOR {
                    clamp_events += 1;
                }
            }
            g[i] = (s - v[i]) / b as f64;
        }
    }
    LossOutput::new(loss / b as f64, grad, clamp_events)
}

fn check_alpha_ls(alpha_ls: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha_ls) {
        return Err(Error::InvalidParameter(format!(
            "label-smoothing coefficient must lie in [0, 1), got {alpha_ls}"
        )));
    }
    Ok(())
}

/// Smoothed one-hot rows: `alpha_ls / C` on every non-target class and
/// `1 - alpha_ls (C - 1) / C` on the target.
pub fn smooth_labels(labels: &LabelBatch, alpha_ls: f64) -> Result<LabelBatch> {
    check_alpha_ls(alpha_ls)?;
    if !labels.is_one_hot() {
        return Err(Error::InvalidInput(
            "label smoothing expects one-hot labels".into(),
        ));
    }
    let (b, c) = labels.values().shape();
    let off = alpha_ls / c as f64;
    let on = 1.0 - alpha_ls * (c as f64 - 1.0) / c as f64;
    let mut values = Matrix::zeros(b, c);
    for (r, &t) in labels.targets().iter().enumerate() {
        let row = values.row_mut(r);
        row.fill(off);
        row[t] = on;
    }
    LabelBatch::new(values)
}

/// Cross-entropy against label-smoothed targets.
pub fn label_smooth_ce(
    student_logits: &Matrix,
    labels_one_hot: &LabelBatch,
    alpha_ls: f64,
) -> Result<LossOutput> {
    ce_loss(student_logits, &smooth_labels(labels_one_hot, alpha_ls)?)
}

/// Label-smoothed CE rewritten as a target term plus a non-target ratio term:
/// `-(alpha_ls / C) Σ_{i≠t} log(S_i / S_t) - log S_t`, averaged over the batch.
pub fn ls_decomposed(student_logits: &Matrix, targets: &[usize], alpha_ls: f64) -> Result<f64> {
    check_alpha_ls(alpha_ls)?;
    if targets.len() != student_logits.rows() {
        return Err(Error::dim(format!(
            "{} targets for {} rows",
            targets.len(),
            student_logits.rows()
        )));
    }
    let c = student_logits.cols();
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::InvalidInput(format!("target {t} out of range")));
        }
        let log_s = log_softmax_row(student_logits.row(r), 1.0)?;
        let ratio_sum: f64 = (0..c)
            .filter(|&i| i != t)
            .map(|i| log_s[i] - log_s[t])
            .sum();
        total += -(alpha_ls / c as f64) * ratio_sum - log_s[t];
    }
    Ok(total / targets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn logits(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn symmetric_cases() {
        let l = LabelBatch::one_hot(&[0], 2).unwrap();
        let out = ce_loss(&logits(&[&[0.0, 0.0]]), &l).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(out.grad.row(0), &[-0.5, 0.5]);

        let l = LabelBatch::one_hot(&[3], 4).unwrap();
        let out = ce_loss(&logits(&[&[0.0; 4]]), &l).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn soft_label_row() {
        let l = LabelBatch::new(logits(&[&[0.8, 0.2]])).unwrap();
        let out = ce_loss(&logits(&[&[1.0, 0.0]]), &l).unwrap();
        // scalar oracle
        let s0 = 1f64.exp() / (1f64.exp() + 1.0);
        let s1 = 1.0 / (1f64.exp() + 1.0);
        let expected = -0.8 * s0.ln() - 0.2 * s1.ln();
        assert!((out.loss - expected).abs() < 1e-15);
        assert!((out.grad.get(0, 0) - (s0 - 0.8)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let l = LabelBatch::one_hot(&[0], 3).unwrap();
        assert!(matches!(
            ce_loss(&logits(&[&[0.0, 0.0]]), &l),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn smoothing_degenerate_and_symmetric() {
        let mut rng = SeededRng::new(5);
        let z = Matrix::from_vec(3, 5, (0..15).map(|_| rng.normal(0.0, 2.0)).collect()).unwrap();
        let l = LabelBatch::one_hot(&[0, 4, 2], 5).unwrap();
        let a = ce_loss(&z, &l).unwrap();
        let b = label_smooth_ce(&z, &l, 0.0).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-14);
        assert!((ls_decomposed(&z, l.targets(), 0.0).unwrap() - a.loss).abs() < 1e-14);

        let l2 = LabelBatch::one_hot(&[1], 2).unwrap();
        let out = label_smooth_ce(&logits(&[&[0.0, 0.0]]), &l2, 0.1).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-15);
        assert!(
            (ls_decomposed(&logits(&[&[0.0, 0.0]]), &[1], 0.3).unwrap() - 2f64.ln()).abs() < 1e-15
        );
    }

    #[test]
    fn smoothed_rows_sum_to_one() {
        let l = LabelBatch::one_hot(&[1, 2], 10).unwrap();
        let s = smooth_labels(&l, 0.1).unwrap();
        assert!((s.values().get(0, 1) - 0.91).abs() < 1e-15);
        assert!((s.values().get(0, 0) - 0.01).abs() < 1e-15);
        assert_eq!(s.targets(), &[1, 2]);
    }

    #[test]
    fn smoothing_identity_random() {
        let mut rng = SeededRng::new(11);
        for _ in 0..50 {
            let z =
                Matrix::from_vec(4, 10, (0..40).map(|_| rng.normal(0.0, 3.0)).collect()).unwrap();
            let classes: Vec<usize> = (0..4).map(|_| rng.below(10)).collect();
            let l = LabelBatch::one_hot(&classes, 10).unwrap();
            let a = label_smooth_ce(&z, &l, 0.1).unwrap().loss;
            let b = ls_decomposed(&z, l.targets(), 0.1).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn bad_alpha_ls() {
        let l = LabelBatch::one_hot(&[0], 2).unwrap();
        let z = logits(&[&[0.0, 1.0]]);
        for bad in [-0.1, 1.0, 1.5] {
            assert!(matches!(
                label_smooth_ce(&z, &l, bad),
                Err(Error::InvalidParameter(_))
            ));
            assert!(matches!(
                ls_decomposed(&z, &[0], bad),
                Err(Error::InvalidParameter(_))
            ));
        }
    }
}
