use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::{ce_loss, check_batch, distributed_loss, soft_loss, teacher_target_probs};
use super::{LabelBatch, LossOutput};

/// Hyper-parameters and term switches for the combined distillation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of the distributed term.
    pub alpha: f64,
    /// Temperature of the distributed term.
    pub lambda: f64,
    pub use_soft: bool,
    pub use_distributed: bool,
    /// Replace the teacher's `T_t` by 1 in the soft term.
    pub perfect_teacher: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 1.5,
            lambda: 1.0,
            use_soft: true,
            use_distributed: true,
            perfect_teacher: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be finite and nonnegative, got {}",
                self.alpha
            )));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be finite and positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Factor `α λ²` applied to the distributed term.
    pub fn distributed_weight(&self) -> f64 {
        self.alpha * self.lambda * self.lambda
    }
}

/// The combined loss together with each constituent term.
#[derive(Debug, Clone)]
pub struct NkdOutput {
    pub total: LossOutput,
    pub ce: LossOutput,
    pub soft: Option<LossOutput>,
    /// Unweighted distributed term; `total` adds it times `distributed_weight`.
    pub distributed: Option<LossOutput>,
    pub distributed_weight: f64,
    /// `T_t` used by the soft term (all ones in perfect-teacher mode).
    pub teacher_target: Vec<f64>,
}

/// `CE + [soft] + [α λ² · distributed]`.
///
/// CE and soft terms are at temperature 1; only the distributed term uses
/// `config.lambda`. The target index comes from `labels`.
pub fn nkd_loss(
    student_logits: &Matrix,
    teacher_logits: &Matrix,
    labels: &LabelBatch,
    config: &DistillConfig,
) -> Result<NkdOutput> {
    config.validate()?;
    check_batch(student_logits, teacher_logits)?;
    let targets = labels.targets();
    let ce = ce_loss(student_logits, labels)?;
    let teacher_target = if config.perfect_teacher {
        vec![1.0; targets.len()]
    } else {
        teacher_target_probs(teacher_logits, targets)?
    };

    let mut loss = ce.loss;
    let mut grad = ce.grad.clone();
    let mut clamp_events = ce.clamp_events;
    let mut degenerate_rows = 0;

    let soft = if config.use_soft {
        let s = soft_loss(student_logits, &teacher_target, targets)?;
        loss += s.loss;
        grad.add_scaled_assign(&s.grad, 1.0)?;
        clamp_events += s.clamp_events;
        Some(s)
    } else {
        None
    };

    let weight = config.distributed_weight();
    let distributed = if config.use_distributed {
        let d = distributed_loss(student_logits, teacher_logits, config.lambda, targets)?;
        loss += weight * d.loss;
        grad.add_scaled_assign(&d.grad, weight)?;
        clamp_events += d.clamp_events;
        degenerate_rows += d.degenerate_rows;
        Some(d)
    } else {
        None
    };

    let mut total = LossOutput::new(loss, grad, clamp_events)?;
    total.degenerate_rows = degenerate_rows;
    Ok(NkdOutput {
        total,
        ce,
        soft,
        distributed,
        distributed_weight: weight,
        teacher_target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> (Matrix, Matrix, LabelBatch) {
        let t = Matrix::from_rows(&[[0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()]]).unwrap();
        let s = Matrix::from_rows(&[[0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()]]).unwrap();
        (s, t, LabelBatch::one_hot(&[0], 3).unwrap())
    }

    #[test]
    fn defaults() {
        let c = DistillConfig::default();
        assert_eq!((c.alpha, c.lambda), (1.5, 1.0));
        assert!(c.use_soft && c.use_distributed && !c.perfect_teacher);
    }

    #[test]
    fn worked_example() {
        let (s, t, l) = example();
        let out = nkd_loss(&s, &t, &l, &DistillConfig::default()).unwrap();
        let ln2 = 2f64.ln();
        let dist = -(2.0 / 3.0) * 0.6f64.ln() - (1.0 / 3.0) * 0.4f64.ln();
        let expected = ln2 + 0.7 * ln2 + 1.5 * dist;
        assert!((out.total.loss - expected).abs() < 1e-12);
        assert!((out.total.loss - 2.147_321_196_654_975).abs() < 1e-12);
    }

    #[test]
    fn ablation_switches() {
        let (s, t, l) = example();
        let ce = ce_loss(&s, &l).unwrap();
        let off = DistillConfig {
            use_soft: false,
            use_distributed: false,
            ..Default::default()
        };
        let out = nkd_loss(&s, &t, &l, &off).unwrap();
        assert_eq!(out.total.loss, ce.loss);
        assert_eq!(out.total.grad, ce.grad);

        let zero_alpha = DistillConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let out = nkd_loss(&s, &t, &l, &zero_alpha).unwrap();
        let soft = soft_loss(&s, &[0.7], &[0]).unwrap();
        assert!((out.total.loss - (ce.loss + soft.loss)).abs() < 1e-12);
    }

    #[test]
    fn perfect_teacher_doubles_ce() {
        let (s, t, l) = example();
        let cfg = DistillConfig {
            use_distributed: false,
            perfect_teacher: true,
            ..Default::default()
        };
        let out = nkd_loss(&s, &t, &l, &cfg).unwrap();
        let ce = ce_loss(&s, &l).unwrap();
        assert!((out.total.loss - 2.0 * ce.loss).abs() < 1e-15);
        assert_eq!(out.teacher_target, vec![1.0]);
    }

    #[test]
    fn rejects_bad_config() {
        let (s, t, l) = example();
        for cfg in [
            DistillConfig {
                alpha: -1.0,
                ..Default::default()
            },
            DistillConfig {
                lambda: 0.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                nkd_loss(&s, &t, &l, &cfg),
                Err(Error::InvalidParameter(_))
            ));
        }
    }
}
