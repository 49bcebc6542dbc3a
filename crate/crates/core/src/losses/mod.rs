//! Losses as pure functions from logits and labels to a batch-mean scalar and
//! its analytic gradient with respect to the student logits.
//!
//! Every loss is averaged over the batch, so gradients carry a `1/B` factor.
//! Teacher quantities and teacher-free weights are constants: no gradient
//! flows through them.

mod ce;
mod kd;
mod labels;
mod nkd;
mod tfnkd;

pub use ce::{ce_loss, label_smooth_ce, ls_decomposed, smooth_labels};
pub use kd::{
    distributed_loss, kd_classical, kd_decomposed, non_target_distribution, soft_loss,
    teacher_target_probs, DEGENERATE_EPS,
};
pub use labels::LabelBatch;
pub use nkd::{nkd_loss, DistillConfig, NkdOutput};
pub use tfnkd::{
    smooth_weight, student_target_probs, tfnkd_loss, tfnkd_loss_with_weights, SmoothedWeights,
    TfNkdOutput, WeightStrategy,
};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Probabilities below this floor count as a clamp event. Losses are
/// evaluated through log-softmax, so the floor never alters a value.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Batch-mean loss.
    pub loss: f64,
    /// Gradient of `loss` w.r.t. the student logits, `B x C`.
    pub grad: Matrix,
    /// Probabilities or denominators that fell below [`PROB_FLOOR`].
    pub clamp_events: usize,
    /// Rows skipped because the teacher had no non-target mass.
    pub degenerate_rows: usize,
}

impl LossOutput {
    pub(crate) fn new(loss: f64, grad: Matrix, clamp_events: usize) -> Result<Self> {
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {loss}")));
        }
        grad.check_finite()
            .map_err(|e| Error::Numeric(format!("loss gradient: {e}")))?;
        Ok(LossOutput {
            loss,
            grad,
            clamp_events,
            degenerate_rows: 0,
        })
    }
}

pub(crate) fn check_batch(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "student logits {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    if a.rows() == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    Ok(())
}

pub(crate) fn check_targets(targets: &[usize], logits: &Matrix) -> Result<()> {
    if targets.len() != logits.rows() {
        return Err(Error::Dimension(format!(
            "{} targets for {} rows",
            targets.len(),
            logits.rows()
        )));
    }
    if targets.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::InvalidInput(format!(
            "target {t} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}
