//! Deterministic mini-batch SGD for baseline, distillation and teacher-free
//! training, plus teacher caching and weight tracing.

mod cache;
mod metrics;
mod sgd;
mod trace;

pub use cache::{build_teacher_cache, TeacherCache};
pub use metrics::{
    evaluate, metrics_rows, timestamp_line, write_csv, write_metrics_csv, Evaluation,
    MetricsRecord, Split, METRICS_COLUMNS,
};
pub use sgd::{sgd_step, LrSchedule, MixupMode, SgdState, TrainConfig};
pub use trace::{TraceRecord, WeightTrace, TRACE_COLUMNS};

use std::collections::HashSet;

use crate::data::{batches, mixup, Batch, Dataset, SampleId};
use crate::error::{Error, Result};
use crate::losses::{
    ce_loss, kd_classical, label_smooth_ce, nkd_loss, smooth_weight, student_target_probs,
    tfnkd_loss, DistillConfig, LossOutput, WeightStrategy,
};
use crate::models::{backward, forward, init_params, ModelParams, ModelSpec};
use crate::numerics::{batch_mean, Matrix, SeededRng};

/// Training objective.
#[derive(Debug, Clone, Copy)]
pub enum LossSelector<'a> {
    Ce,
    LabelSmooth {
        alpha_ls: f64,
    },
    Nkd {
        cache: &'a TeacherCache,
        config: DistillConfig,
    },
    /// `CE + α λ² · KD` with KD in cross-entropy form.
    ClassicalKd {
        cache: &'a TeacherCache,
        alpha: f64,
        lambda: f64,
    },
    TfNkd {
        strategy: WeightStrategy,
    },
}

impl LossSelector<'_> {
    fn cache(&self) -> Option<&TeacherCache> {
        match self {
            LossSelector::Nkd { cache, .. } | LossSelector::ClassicalKd { cache, .. } => {
                Some(cache)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Epoch 0 (initial model) then one train and one test row per epoch.
    pub metrics: Vec<MetricsRecord>,
    pub trace: Option<WeightTrace>,
    /// Largest `|total - (ce + soft + distributed)|` seen over all batches.
    pub max_additivity_residual: f64,
}

impl TrainOutcome {
    pub fn final_record(&self, split: Split) -> Option<&MetricsRecord> {
        self.metrics.iter().rev().find(|m| m.split == split)
    }
}

struct StepLoss {
    total: LossOutput,
    ce: f64,
    soft: f64,
    distributed: f64,
}

fn step_loss(selector: &LossSelector<'_>, logits: &Matrix, batch: &Batch) -> Result<StepLoss> {
    let labels = &batch.labels;
    Ok(match *selector {
        LossSelector::Ce => {
            let out = ce_loss(logits, labels)?;
            StepLoss {
                ce: out.loss,
                soft: 0.0,
                distributed: 0.0,
                total: out,
            }
        }
        LossSelector::LabelSmooth { alpha_ls } => {
            let out = label_smooth_ce(logits, labels, alpha_ls)?;
            StepLoss {
                ce: out.loss,
                soft: 0.0,
                distributed: 0.0,
                total: out,
            }
        }
        LossSelector::Nkd { cache, config } => {
            let teacher = cache.logits_for(&batch.sample_ids)?;
            let out = nkd_loss(logits, &teacher, labels, &config)?;
            StepLoss {
                ce: out.ce.loss,
                soft: out.soft.as_ref().map_or(0.0, |s| s.loss),
                distributed: out
                    .distributed
                    .as_ref()
                    .map_or(0.0, |d| out.distributed_weight * d.loss),
                total: out.total,
            }
        }
        LossSelector::ClassicalKd {
            cache,
            alpha,
            lambda,
        } => {
            let teacher = cache.logits_for(&batch.sample_ids)?;
            let ce = ce_loss(logits, labels)?;
            let kd = kd_classical(logits, &teacher, lambda, true)?;
            let mut grad = ce.grad.clone();
            grad.add_scaled_assign(&kd.grad, alpha)?;
            let total = LossOutput {
                loss: ce.loss + alpha * kd.loss,
                grad,
                clamp_events: ce.clamp_events + kd.clamp_events,
                degenerate_rows: 0,
            };
            StepLoss {
                ce: ce.loss,
                soft: 0.0,
                distributed: alpha * kd.loss,
                total,
            }
        }
        LossSelector::TfNkd { strategy } => {
            let out = tfnkd_loss(logits, labels, strategy)?;
            StepLoss {
                ce: out.ce.loss,
                soft: out.soft.loss,
                distributed: 0.0,
                total: out.loss,
            }
        }
    })
}

/// Per-epoch seed derived from the run seed.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1)
}

fn record_trace(
    trace: &mut WeightTrace,
    tracked: &HashSet<SampleId>,
    logits: &Matrix,
    batch: &Batch,
    epoch: usize,
) -> Result<()> {
    if !batch.sample_ids.iter().any(|id| tracked.contains(id)) {
        return Ok(());
    }
    let st = student_target_probs(logits, batch.labels.targets())?;
    let vt = batch.labels.target_values();
    let mean = batch_mean(&st)?;
    let mut per_strategy = Vec::with_capacity(6);
    for s in WeightStrategy::TEACHER_FREE {
        per_strategy.push(smooth_weight(&st, &vt, s)?.weights);
    }
    for (r, id) in batch.sample_ids.iter().enumerate() {
        if tracked.contains(id) {
            let mut weights = [0.0; 6];
            for (k, w) in per_strategy.iter().enumerate() {
                weights[k] = w[r];
            }
            trace.records.push(TraceRecord {
                epoch,
                sample_id: *id,
                student_target: st[r],
                target_value: vt[r],
                batch_mean: mean,
                weights,
            });
        }
    }
    Ok(())
}

fn numeric_context(e: Error, epoch: usize, step: usize, batch: &Batch) -> Error {
    match e {
        Error::Numeric(message) => Error::Diverged {
            message,
            epoch,
            step,
            sample_ids: batch.sample_ids.clone(),
        },
        other => other,
    }
}

fn eval_record(
    params: &ModelParams,
    data: &Dataset,
    split: Split,
    epoch: usize,
    k: usize,
) -> Result<(Evaluation, MetricsRecord)> {
    let e = evaluate(params, data, k)?;
    let rec = MetricsRecord {
        epoch,
        split,
        top1: e.top1,
        topk: e.topk,
        mean_loss: e.mean_ce,
        loss_ce: e.mean_ce,
        loss_soft: 0.0,
        loss_distributed: 0.0,
        clamp_events: e.clamp_events,
    };
    Ok((e, rec))
}

/// Trains a freshly initialized model.
///
/// Everything random (init, batch order, mixup) is derived from
/// `config.seed`, so equal inputs produce bit-identical outcomes. When
/// `trace_ids` is non-empty a [`WeightTrace`] is recorded for those samples.
pub fn train(
    spec: &ModelSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    selector: LossSelector<'_>,
    config: &TrainConfig,
    trace_ids: &[SampleId],
) -> Result<TrainOutcome> {
    config.validate()?;
    spec.validate()?;
    if train_set.input_dim() != spec.input_dim || test_set.input_dim() != spec.input_dim {
        return Err(Error::Dimension(format!(
            "model input dim {} vs data dims {}/{}",
            spec.input_dim,
            train_set.input_dim(),
            test_set.input_dim()
        )));
    }
    if train_set.num_classes() != spec.num_classes || test_set.num_classes() != spec.num_classes {
        return Err(Error::Dimension(
            "model and dataset class counts differ".into(),
        ));
    }
    if let Some(cache) = selector.cache() {
        cache.check_complete(train_set)?;
        if config.mixup != MixupMode::Off {
            return Err(Error::Config(
                "mixup changes the inputs, so cached teacher logits would not apply".into(),
            ));
        }
    }
    if matches!(selector, LossSelector::LabelSmooth { .. }) && config.mixup != MixupMode::Off {
        return Err(Error::Config(
            "label smoothing expects one-hot labels; disable mixup".into(),
        ));
    }
    if let LossSelector::TfNkd { strategy } = selector {
        if strategy == WeightStrategy::TeacherTarget {
            return Err(Error::InvalidParameter(
                "the teacher-target strategy needs a teacher".into(),
            ));
        }
    }
    if let LossSelector::Nkd { config: dc, .. } = selector {
        dc.validate()?;
    }
    for id in trace_ids {
        if train_set.position_of(*id).is_none() {
            return Err(Error::InvalidInput(format!(
                "traced sample id {id} is not in the training set"
            )));
        }
    }

    let mut params = init_params(spec, &mut SeededRng::derive(config.seed, 0x1417))?;
    let mut state = SgdState::new(&params);
    let mut metrics = Vec::with_capacity(2 * config.epochs + 2);
    metrics.push(eval_record(&params, train_set, Split::Train, 0, config.topk)?.1);
    metrics.push(eval_record(&params, test_set, Split::Test, 0, config.topk)?.1);

    let tracked: HashSet<SampleId> = trace_ids.iter().copied().collect();
    let mut trace = (!tracked.is_empty()).then(WeightTrace::default);
    let mut max_residual: f64 = 0.0;

    for epoch in 0..config.epochs {
        let seed = epoch_seed(config.seed, epoch);
        let lr = config.lr_schedule.lr_at(config.lr, epoch, config.epochs);
        let mut mix_rng = SeededRng::derive(seed, 2);
        let mut sums = [0.0f64; 4];
        let mut clamp_events = 0;
        for (step, batch) in batches(train_set, config.batch_size, seed)?
            .into_iter()
            .enumerate()
        {
            let batch = match config.mixup {
                MixupMode::Off => batch,
                ref mode => {
                    let lam = match *mode {
                        MixupMode::Fixed { lam } => lam,
                        MixupMode::Beta { alpha } => mix_rng.beta(alpha, alpha)?,
                        MixupMode::Off => unreachable!(),
                    };
                    let mut perm: Vec<usize> = (0..batch.len()).collect();
                    mix_rng.shuffle(&mut perm);
                    let partner = Batch {
                        inputs: batch.inputs.select_rows(&perm),
                        labels: batch.labels.select(&perm),
                        sample_ids: perm.iter().map(|&i| batch.sample_ids[i]).collect(),
                    };
                    mixup(&batch, &partner, lam)?
                }
            };
            let (logits, cache) = forward(&params, &batch.inputs)
                .map_err(|e| numeric_context(e, epoch + 1, step, &batch))?;
            if let Some(trace) = trace.as_mut() {
                record_trace(trace, &tracked, &logits, &batch, epoch + 1)?;
            }
            let loss = step_loss(&selector, &logits, &batch)
                .map_err(|e| numeric_context(e, epoch + 1, step, &batch))?;
            max_residual = max_residual
                .max((loss.total.loss - (loss.ce + loss.soft + loss.distributed)).abs());
            let grads = backward(&params, &cache, &loss.total.grad)?;
            sgd_step(
                &mut params,
                &grads,
                &mut state,
                lr,
                config.momentum,
                config.weight_decay,
            )
            .map_err(|e| numeric_context(e, epoch + 1, step, &batch))?;

            let n = batch.len() as f64;
            sums[0] += n * loss.total.loss;
            sums[1] += n * loss.ce;
            sums[2] += n * loss.soft;
            sums[3] += n * loss.distributed;
            clamp_events += loss.total.clamp_events;
        }
        let n = train_set.len() as f64;
        let (train_eval, _) =
            eval_record(&params, train_set, Split::Train, epoch + 1, config.topk)?;
        metrics.push(MetricsRecord {
            epoch: epoch + 1,
            split: Split::Train,
            top1: train_eval.top1,
            topk: train_eval.topk,
            mean_loss: sums[0] / n,
            loss_ce: sums[1] / n,
            loss_soft: sums[2] / n,
            loss_distributed: sums[3] / n,
            clamp_events,
        });
        metrics.push(eval_record(&params, test_set, Split::Test, epoch + 1, config.topk)?.1);
    }

    Ok(TrainOutcome {
        params,
        metrics,
        trace,
        max_additivity_residual: max_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blob_split, BlobSpec};

    fn tiny() -> (Dataset, Dataset) {
        let (train, test) = generate_blob_split(
            &BlobSpec {
                num_classes: 3,
                dim: 4,
                samples_per_class: 20,
                center_scale: 3.0,
                noise_sigma: 0.5,
                seed: 1,
                modes_per_class: 1,
            },
            5,
        )
        .unwrap();
        (train.dataset, test)
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            lr: 0.05,
            lr_schedule: LrSchedule::Constant,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_reports_initial_model() {
        let (train_set, test_set) = tiny();
        let spec = ModelSpec::new(4, vec![8], 3).unwrap();
        let out = train(
            &spec,
            &train_set,
            &test_set,
            LossSelector::Ce,
            &quick(0),
            &[],
        )
        .unwrap();
        assert_eq!(out.metrics.len(), 2);
        let init = init_params(&spec, &mut SeededRng::derive(0, 0x1417)).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn rejects_teacher_strategy_and_unknown_trace_id() {
        let (train_set, test_set) = tiny();
        let spec = ModelSpec::new(4, vec![], 3).unwrap();
        let sel = LossSelector::TfNkd {
            strategy: WeightStrategy::TeacherTarget,
        };
        assert!(train(&spec, &train_set, &test_set, sel, &quick(1), &[]).is_err());
        assert!(train(
            &spec,
            &train_set,
            &test_set,
            LossSelector::Ce,
            &quick(1),
            &[999]
        )
        .is_err());
    }

    #[test]
    fn incomplete_cache_is_a_precondition_error() {
        let (train_set, test_set) = tiny();
        let spec = ModelSpec::new(4, vec![], 3).unwrap();
        let teacher = init_params(&spec, &mut SeededRng::new(3)).unwrap();
        let cache = build_teacher_cache(&teacher, &test_set).unwrap();
        let sel = LossSelector::Nkd {
            cache: &cache,
            config: DistillConfig::default(),
        };
        let err = train(&spec, &train_set, &test_set, sel, &quick(1), &[]).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)), "{err}");
    }

    #[test]
    fn mixup_training_runs_and_traces() {
        let (train_set, test_set) = tiny();
        let spec = ModelSpec::new(4, vec![6], 3).unwrap();
        let cfg = TrainConfig {
            mixup: MixupMode::Beta { alpha: 0.4 },
            ..quick(2)
        };
        let sel = LossSelector::TfNkd {
            strategy: WeightStrategy::StPlusVtMinusMean,
        };
        let out = train(&spec, &train_set, &test_set, sel, &cfg, &[0, 1]).unwrap();
        let trace = out.trace.unwrap();
        assert_eq!(trace.records.len(), 4);
        for r in &trace.records {
            assert_eq!(
                r.weights[0],
                r.student_target + r.target_value - r.batch_mean
            );
        }
    }
}
