use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{batch_max, batch_mean, batch_min, log_softmax_row, softmax_row, Matrix};

use super::kd::weighted_target_ce;
use super::{ce_loss, LabelBatch, LossOutput};

const STAT_FLOOR: f64 = 1e-12;

/// Rule turning the batch's student target probabilities into soft-target
/// weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightStrategy {
    /// `S_t`
    RawSt,
    /// `S_t + V_t - mean(S_t)`
    #[default]
    StPlusVtMinusMean,
    /// `softmax_batch(S_t) · Σ_b V_t`
    BatchSoftmaxTimesSum,
    /// `sqrt(S_t - min(S_t))`
    SqrtStMinusMin,
    /// `S_t / max(S_t)`
    StOverMax,
    /// `S_t / mean(S_t)`
    StOverMean,
    /// Teacher target probability; not computable without a teacher.
    TeacherTarget,
}

impl WeightStrategy {
    /// The six teacher-free variants, default first.
    pub const TEACHER_FREE: [WeightStrategy; 6] = [
        WeightStrategy::StPlusVtMinusMean,
        WeightStrategy::RawSt,
        WeightStrategy::BatchSoftmaxTimesSum,
        WeightStrategy::SqrtStMinusMin,
        WeightStrategy::StOverMax,
        WeightStrategy::StOverMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightStrategy::RawSt => "raw-st",
            WeightStrategy::StPlusVtMinusMean => "st-plus-vt-minus-mean",
            WeightStrategy::BatchSoftmaxTimesSum => "batch-softmax-times-sum",
            WeightStrategy::SqrtStMinusMin => "sqrt-st-minus-min",
            WeightStrategy::StOverMax => "st-over-max",
            WeightStrategy::StOverMean => "st-over-mean",
            WeightStrategy::TeacherTarget => "teacher-target",
        }
    }
}

impl fmt::Display for WeightStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            WeightStrategy::RawSt,
            WeightStrategy::StPlusVtMinusMean,
            WeightStrategy::BatchSoftmaxTimesSum,
            WeightStrategy::SqrtStMinusMin,
            WeightStrategy::StOverMax,
            WeightStrategy::StOverMean,
            WeightStrategy::TeacherTarget,
        ]
        .into_iter()
        .find(|w| w.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown weight strategy '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedWeights {
    pub weights: Vec<f64>,
    /// A max or mean statistic was exactly 0 and got floored.
    pub degenerate: bool,
}

/// Per-sample soft-target weights from the batch's `S_t` and `V_t`.
///
/// Batch statistics run over the batch dimension. The weights are treated
/// as constants by the losses that consume them.
pub fn smooth_weight(
    student_target: &[f64],
    target_values: &[f64],
    strategy: WeightStrategy,
) -> Result<SmoothedWeights> {
    if student_target.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if student_target.len() != target_values.len() {
        return Err(Error::dim(format!(
            "{} target probabilities vs {} label values",
            student_target.len(),
            target_values.len()
        )));
    }
    if let Some(s) = student_target.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidInput(format!(
            "student target probability {s} outside [0, 1]"
        )));
    }
    let mut degenerate = false;
    let mut floored = |v: f64| {
        if v <= 0.0 {
            degenerate = true;
            STAT_FLOOR
        } else {
            v
        }
    };
    let st = student_target;
    let weights = match strategy {
        WeightStrategy::RawSt => st.to_vec(),
        WeightStrategy::StPlusVtMinusMean => {
            let mean = batch_mean(st)?;
            st.iter()
                .zip(target_values)
                .map(|(s, v)| s + v - mean)
                .collect()
        }
        WeightStrategy::BatchSoftmaxTimesSum => {
            let total: f64 = target_values.iter().sum();
            softmax_row(st, 1.0)?
                .into_iter()
                .map(|p| p * total)
                .collect()
        }
        WeightStrategy::SqrtStMinusMin => {
            let min = batch_min(st)?;
            st.iter().map(|s| (s - min).max(0.0).sqrt()).collect()
        }
        WeightStrategy::StOverMax => {
            let max = floored(batch_max(st)?);
            st.iter().map(|s| s / max).collect()
        }
        WeightStrategy::StOverMean => {
            let mean = floored(batch_mean(st)?);
            st.iter().map(|s| s / mean).collect()
        }
        WeightStrategy::TeacherTarget => {
            return Err(Error::InvalidParameter(
                "teacher-target weights need a teacher; use the distillation loss".into(),
            ))
        }
    };
    Ok(SmoothedWeights {
        weights,
        degenerate,
    })
}

/// Student target probabilities `S_t` at temperature 1.
pub fn student_target_probs(student_logits: &Matrix, targets: &[usize]) -> Result<Vec<f64>> {
    super::check_targets(targets, student_logits)?;
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| Ok(log_softmax_row(student_logits.row(r), 1.0)?[t].exp()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TfNkdOutput {
    pub loss: LossOutput,
    /// CE part of `loss`.
    pub ce: LossOutput,
    /// Weighted target term of `loss`.
    pub soft: LossOutput,
    pub student_target: Vec<f64>,
    pub weights: Vec<f64>,
    pub degenerate: bool,
}

/// Teacher-free loss: `CE + mean_b[-w_b log S_t]` with `w` from
/// [`smooth_weight`] held constant.
pub fn tfnkd_loss(
    student_logits: &Matrix,
    labels: &LabelBatch,
    strategy: WeightStrategy,
) -> Result<TfNkdOutput> {
    let student_target = student_target_probs(student_logits, labels.targets())?;
    let smoothed = smooth_weight(&student_target, &labels.target_values(), strategy)?;
    let (loss, ce, soft) = tfnkd_parts(student_logits, labels, &smoothed.weights)?;
    Ok(TfNkdOutput {
        loss,
        ce,
        soft,
        student_target,
        weights: smoothed.weights,
        degenerate: smoothed.degenerate,
    })
}

/// Teacher-free loss with externally supplied (frozen) weights.
pub fn tfnkd_loss_with_weights(
    student_logits: &Matrix,
    labels: &LabelBatch,
    weights: &[f64],
) -> Result<LossOutput> {
    Ok(tfnkd_parts(student_logits, labels, weights)?.0)
}

fn tfnkd_parts(
    student_logits: &Matrix,
    labels: &LabelBatch,
    weights: &[f64],
) -> Result<(LossOutput, LossOutput, LossOutput)> {
    if weights.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} weights for {} rows",
            weights.len(),
            labels.len()
        )));
    }
    let ce = ce_loss(student_logits, labels)?;
    let soft = weighted_target_ce(student_logits, weights, labels.targets())?;
    let mut grad = ce.grad.clone();
    grad.add_scaled_assign(&soft.grad, 1.0)?;
    let total = LossOutput::new(
        ce.loss + soft.loss,
        grad,
        ce.clamp_events + soft.clamp_events,
    )?;
    Ok((total, ce, soft))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_strategy_example() {
        let w = smooth_weight(&[0.2, 0.6], &[1.0, 1.0], WeightStrategy::StPlusVtMinusMean).unwrap();
        assert!((w.weights[0] - 0.8).abs() < 1e-15);
        assert!((w.weights[1] - 1.2).abs() < 1e-15);
        assert!(!w.degenerate);
    }

    #[test]
    fn self_normalizing_and_single_sample() {
        let w = smooth_weight(&[0.3, 0.3, 0.3], &[1.0; 3], WeightStrategy::StOverMax).unwrap();
        assert_eq!(w.weights, vec![1.0, 1.0, 1.0]);
        let w = smooth_weight(&[0.42], &[1.0], WeightStrategy::SqrtStMinusMin).unwrap();
        assert_eq!(w.weights, vec![0.0]);
    }

    #[test]
    fn remaining_variants() {
        let st = [0.1, 0.5, 0.3];
        let vt = [1.0, 0.8, 1.0];
        let raw = smooth_weight(&st, &vt, WeightStrategy::RawSt).unwrap();
        assert_eq!(raw.weights, st.to_vec());

        let sm = smooth_weight(&st, &vt, WeightStrategy::BatchSoftmaxTimesSum).unwrap();
        let denom: f64 = st.iter().map(|s: &f64| s.exp()).sum();
        for (w, s) in sm.weights.iter().zip(st) {
            assert!((w - s.exp() / denom * 2.8).abs() < 1e-14);
        }
        assert!((sm.weights.iter().sum::<f64>() - 2.8).abs() < 1e-14);

        let mean = smooth_weight(&st, &vt, WeightStrategy::StOverMean).unwrap();
        assert!((mean.weights[1] - 0.5 / 0.3).abs() < 1e-14);

        let sq = smooth_weight(&st, &vt, WeightStrategy::SqrtStMinusMin).unwrap();
        assert!((sq.weights[1] - 0.4f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_statistics_are_floored() {
        let w = smooth_weight(&[0.0, 0.0], &[1.0, 1.0], WeightStrategy::StOverMax).unwrap();
        assert!(w.degenerate);
        assert_eq!(w.weights, vec![0.0, 0.0]);
        let w = smooth_weight(&[0.0, 0.0], &[1.0, 1.0], WeightStrategy::StOverMean).unwrap();
        assert!(w.degenerate);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            smooth_weight(&[], &[], WeightStrategy::RawSt),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            smooth_weight(&[0.5], &[1.0], WeightStrategy::TeacherTarget),
            Err(Error::InvalidParameter(_))
        ));
        assert!("st-over-max".parse::<WeightStrategy>().is_ok());
        assert!("nope".parse::<WeightStrategy>().is_err());
    }

    #[test]
    fn zero_weights_reduce_to_ce() {
        // Constant logits give constant S_t, so sqrt(S_t - min) is zero.
        let z = Matrix::from_rows(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]).unwrap();
        let l = LabelBatch::one_hot(&[0, 2], 3).unwrap();
        let out = tfnkd_loss(&z, &l, WeightStrategy::SqrtStMinusMin).unwrap();
        let ce = ce_loss(&z, &l).unwrap();
        assert_eq!(out.loss.loss, ce.loss);
        assert_eq!(out.loss.grad, ce.grad);
    }

    #[test]
    fn single_sample_default_is_double_ce() {
        let z = Matrix::from_rows(&[[0.3, 1.2, -0.5]]).unwrap();
        let l = LabelBatch::one_hot(&[1], 3).unwrap();
        let out = tfnkd_loss(&z, &l, WeightStrategy::StPlusVtMinusMean).unwrap();
        assert_eq!(out.weights, vec![1.0]);
        let log_st = log_softmax_row(z.row(0), 1.0).unwrap()[1];
        assert!((out.loss.loss + 2.0 * log_st).abs() < 1e-14);
    }

    #[test]
    fn two_sample_worked_example() {
        // Logits chosen so S_t = 0.2 and 0.6 exactly (two classes).
        let z =
            Matrix::from_rows(&[[0.2f64.ln(), 0.8f64.ln()], [0.6f64.ln(), 0.4f64.ln()]]).unwrap();
        let l = LabelBatch::one_hot(&[0, 0], 2).unwrap();
        let out = tfnkd_loss(&z, &l, WeightStrategy::StPlusVtMinusMean).unwrap();
        let second = -(0.8 * 0.2f64.ln() + 1.2 * 0.6f64.ln()) / 2.0;
        assert!((out.soft.loss - second).abs() < 1e-12);
        let ce = -(0.2f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((out.loss.loss - ce - second).abs() < 1e-12);
    }
}
