use crate::error::{Error, Result};
use crate::numerics::{log_softmax_row, log_softmax_row_excluding, softmax_row, Matrix};

use super::{check_batch, check_targets, LossOutput, PROB_FLOOR};

/// Teacher rows whose target probability reaches `1 - DEGENERATE_EPS` carry
/// no non-target mass to transfer.
pub const DEGENERATE_EPS: f64 = 1e-12;

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be finite and positive, got {lambda}"
        )));
    }
    Ok(())
}

/// Classical KD in cross-entropy form: `mean_b[-Σ_i T_i^λ log S_i^λ]`.
///
/// The teacher is a constant. The gradient w.r.t. student logits is
/// `(S^λ - T^λ) / (λ B)`, times `λ²` when `lambda_sq` is set.
pub fn kd_classical(
    student_logits: &Matrix,
    teacher_logits: &Matrix,
    lambda: f64,
    lambda_sq: bool,
) -> Result<LossOutput> {
    check_lambda(lambda)?;
    check_batch(student_logits, teacher_logits)?;
    let (b, c) = student_logits.shape();
    let scale = if lambda_sq { lambda * lambda } else { 1.0 };
    let mut grad = Matrix::zeros(b, c);
    let mut loss = 0.0;
    let mut clamp_events = 0;
    for r in 0..b {
        let log_s = log_softmax_row(student_logits.row(r), lambda)?;
        let t = softmax_row(teacher_logits.row(r), lambda)?;
        let g = grad.row_mut(r);
        for i in 0..c {
            let s = log_s[i].exp();
            if t[i] > 0.0 && s < PROB_FLOOR {
                clamp_events += 1;
            }
            loss -= t[i] * log_s[i];
            g[i] = scale * (s - t[i]) / (lambda * b as f64);
        }
    }
    LossOutput::new(scale * loss / b as f64, grad, clamp_events)
}

/// Classical KD split into a target term and a non-target ratio term:
/// `-log S_t^λ - Σ_{i≠t} T_i^λ log(S_i^λ / S_t^λ)`, averaged over the batch.
pub fn kd_decomposed(
    student_logits: &Matrix,
    teacher_logits: &Matrix,
    lambda: f64,
    targets: &[usize],
) -> Result<f64> {
    check_lambda(lambda)?;
    check_batch(student_logits, teacher_logits)?;
    check_targets(targets, student_logits)?;
    let c = student_logits.cols();
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let log_s = log_softmax_row(student_logits.row(r), lambda)?;
        let teacher = softmax_row(teacher_logits.row(r), lambda)?;
        let ratio: f64 = (0..c)
            .filter(|&i| i != t)
            .map(|i| teacher[i] * (log_s[i] - log_s[t]))
            .sum();
        total += -log_s[t] - ratio;
    }
    Ok(total / targets.len() as f64)
}

/// Non-target probabilities renormalized to sum to one:
/// `p_i / (1 - p_t)` for `i ≠ t`, with the denominator floored at `1e-12`.
///
/// Entry `t` of the returned vector is 0. The flag reports whether the floor
/// was hit.
pub fn non_target_distribution(probs: &[f64], target: usize) -> (Vec<f64>, bool) {
    let raw = 1.0 - probs[target];
    let clamped = raw < DEGENERATE_EPS;
    let denom = raw.max(DEGENERATE_EPS);
    let out = probs
        .iter()
        .enumerate()
        .map(|(i, p)| if i == target { 0.0 } else { p / denom })
        .collect();
    (out, clamped)
}

/// Distributed loss: cross-entropy between the teacher's and student's
/// renormalized non-target distributions at temperature `lambda`.
///
/// Computed in log space, where the renormalized student distribution is a
/// softmax over the non-target logits alone. This makes the per-row loss
/// independent of the target logit and gives the gradient
/// `(Ŝ_j - T̂_j) / (λ B)` for `j ≠ t` and 0 at `t`.
///
/// Rows with a one-hot teacher (`T_t^λ ≥ 1 - 1e-12`) contribute zero loss and
/// gradient; they are counted in `degenerate_rows`.
pub fn distributed_loss(
    student_logits: &Matrix,
    teacher_logits: &Matrix,
    lambda: f64,
    targets: &[usize],
) -> Result<LossOutput> {
    check_lambda(lambda)?;
    check_batch(student_logits, teacher_logits)?;
    check_targets(targets, student_logits)?;
    let (b, c) = student_logits.shape();
    if c < 2 {
        return Err(Error::InvalidInput(
            "distributed loss needs at least two classes".into(),
        ));
    }
    let mut grad = Matrix::zeros(b, c);
    let mut loss = 0.0;
    let mut clamp_events = 0;
    let mut degenerate_rows = 0;
    for (r, &t) in targets.iter().enumerate() {
        let teacher_probs = softmax_row(teacher_logits.row(r), lambda)?;
        if teacher_probs[t] >= 1.0 - DEGENERATE_EPS {
            degenerate_rows += 1;
            continue;
        }
        let log_t_hat = log_softmax_row_excluding(teacher_logits.row(r), lambda, t)?;
        let log_s_hat = log_softmax_row_excluding(student_logits.row(r), lambda, t)?;
        let student_probs = softmax_row(student_logits.row(r), lambda)?;
        if 1.0 - student_probs[t] < DEGENERATE_EPS {
            clamp_events += 1;
        }
        let g = grad.row_mut(r);
        for i in (0..c).filter(|&i| i != t) {
            let t_hat = log_t_hat[i].exp();
            let s_hat = log_s_hat[i].exp();
            loss -= t_hat * log_s_hat[i];
            g[i] = (s_hat - t_hat) / (lambda * b as f64);
        }
    }
    let mut out = LossOutput::new(loss / b as f64, grad, clamp_events)?;
    out.degenerate_rows = degenerate_rows;
    Ok(out)
}

/// Teacher target probabilities `T_t` at temperature 1.
pub fn teacher_target_probs(teacher_logits: &Matrix, targets: &[usize]) -> Result<Vec<f64>> {
    check_targets(targets, teacher_logits)?;
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| Ok(softmax_row(teacher_logits.row(r), 1.0)?[t]))
        .collect()
}

/// Soft loss `mean_b[-T_t log S_t]` at temperature 1, with `T_t` constant.
///
/// Gradient per row: `T_t (S - e_t) / B`.
pub fn soft_loss(
    student_logits: &Matrix,
    teacher_target: &[f64],
    targets: &[usize],
) -> Result<LossOutput> {
    check_targets(targets, student_logits)?;
    if teacher_target.len() != targets.len() {
        return Err(Error::dim(format!(
            "{} soft targets for {} rows",
            teacher_target.len(),
            targets.len()
        )));
    }
    if let Some(w) = teacher_target.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::InvalidParameter(format!(
            "teacher target probability {w} outside [0, 1]"
        )));
    }
    weighted_target_ce(student_logits, teacher_target, targets)
}

/// `mean_b[-w_b log S_t]` with constant weights; shared by the soft loss and
/// the teacher-free loss.
pub(crate) fn weighted_target_ce(
    student_logits: &Matrix,
    weights: &[f64],
    targets: &[usize],
) -> Result<LossOutput> {
    let (b, c) = student_logits.shape();
    let mut grad = Matrix::zeros(b, c);
    let mut loss = 0.0;
    let mut clamp_events = 0;
    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let log_s = log_softmax_row(student_logits.row(r), 1.0)?;
        if log_s[t].exp() < PROB_FLOOR {
            clamp_events += 1;
        }
        loss -= w * log_s[t];
        let g = grad.row_mut(r);
        for i in 0..c {
            let e = if i == t { 1.0 } else { 0.0 };
            g[i] = w * (log_s[i].exp() - e) / b as f64;
        }
    }
    LossOutput::new(loss / b as f64, grad, clamp_events)
}
