//! Self-contained numerical verification suite: decomposition identities,
//! normalization, finite-difference gradient checks, additivity and shift
//! invariance, all on seeded random instances.

use std::fmt;

use serde::Serialize;

use crate::error::Result;
use crate::gradcheck::{numeric_gradient_matrix, relative_error, DEFAULT_STEP};
use crate::losses::{
    ce_loss, distributed_loss, kd_classical, kd_decomposed, label_smooth_ce, ls_decomposed,
    nkd_loss, smooth_weight, soft_loss, student_target_probs, teacher_target_probs, tfnkd_loss,
    tfnkd_loss_with_weights, DistillConfig, LabelBatch, WeightStrategy, DEGENERATE_EPS,
};
use crate::numerics::{log_softmax_row_excluding, softmax_row, softmax_temp, Matrix, SeededRng};

pub const IDENTITY_TOL: f64 = 1e-9;
pub const NORMALIZATION_TOL: f64 = 1e-10;
pub const GRADIENT_TOL: f64 = 1e-5;
pub const ADDITIVITY_TOL: f64 = 1e-12;
pub const SHIFT_TOL: f64 = 1e-12;

const CLASS_GRID: [usize; 4] = [2, 3, 10, 100];
const LAMBDA_GRID: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
const ALPHA_LS_GRID: [f64; 3] = [0.05, 0.1, 0.2];
const LOGIT_SCALES: [f64; 4] = [0.01, 1.0, 5.0, 20.0];

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    /// Random cases per grid cell (identities) and per loss (gradients).
    pub trials: usize,
    pub seed: u64,
    /// Mutation hook: multiplies the decomposed KD value before comparison.
    /// Anything other than 1 must make the suite fail.
    pub kd_decomposition_scale: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            trials: 100,
            seed: 0,
            kd_decomposition_scale: 1.0,
        }
    }
}

/// A random instance, kept so the worst case can be reported.
#[derive(Debug, Clone, Serialize)]
pub struct Case {
    pub lambda: f64,
    pub student: Vec<Vec<f64>>,
    pub teacher: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_residual: f64,
    pub tolerance: f64,
    pub cases: usize,
    /// Worst instance, present only when the check failed.
    pub failing_case: Option<Case>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_residual < self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            write!(
                f,
                "PASS {} max residual < {:e} (observed {:.3e} over {} cases)",
                self.name, self.tolerance, self.max_residual, self.cases
            )
        } else {
            write!(
                f,
                "FAIL {} max residual {:.3e} >= {:e} over {} cases",
                self.name, self.max_residual, self.tolerance, self.cases
            )?;
            if let Some(case) = &self.failing_case {
                let json = serde_json::to_string(case).map_err(|_| fmt::Error)?;
                write!(f, "\n  failing case: {json}")?;
            }
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Tracks the worst residual seen for one check.
struct Worst {
    name: &'static str,
    tolerance: f64,
    max: f64,
    cases: usize,
    case: Option<Case>,
}

impl Worst {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Worst {
            name,
            tolerance,
            max: 0.0,
            cases: 0,
            case: None,
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn record(&mut self, residual: f64, case: impl FnOnce() -> Case) {
        self.cases += 1;
        // NaN residuals must fail, so compare with a negated `<`.
        if !(residual <= self.max) {
            self.max = if residual.is_nan() {
                f64::INFINITY
            } else {
                residual
            };
            self.case = Some(case());
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn finish(self) -> CheckResult {
        let failed = !(self.max < self.tolerance);
        CheckResult {
            name: self.name.to_string(),
            max_residual: self.max,
            tolerance: self.tolerance,
            cases: self.cases,
            failing_case: if failed { self.case } else { None },
        }
    }
}

fn random_logits(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Result<Matrix> {
    let data = (0..rows * cols).map(|_| rng.normal(0.0, scale)).collect();
    Matrix::from_vec(rows, cols, data)
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(<[f64]>::to_vec).collect()
}

/// One-hot targets, or two-class mixtures leaning towards the first class
/// when `mixed` is set.
fn random_labels(rng: &mut SeededRng, rows: usize, cols: usize, mixed: bool) -> Result<LabelBatch> {
    let mut values = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let a = rng.below(cols);
        let row = values.row_mut(r);
        if mixed && cols > 1 {
            let b = (a + 1 + rng.below(cols - 1)) % cols;
            let lam = 0.55 + 0.45 * rng.uniform();
            row[a] = lam;
            row[b] = 1.0 - lam;
        } else {
            row[a] = 1.0;
        }
    }
    LabelBatch::new(values)
}

fn case(lambda: f64, student: &Matrix, teacher: Option<&Matrix>, labels: &LabelBatch) -> Case {
    Case {
        lambda,
        student: rows_of(student),
        teacher: teacher.map(rows_of).unwrap_or_default(),
        labels: rows_of(labels.values()),
    }
}

fn kd_identity(opts: &VerifyOptions, rng: &mut SeededRng) -> Result<CheckResult> {
    let mut worst = Worst::new("kd decomposition", IDENTITY_TOL);
    for &c in &CLASS_GRID {
        for &lambda in &LAMBDA_GRID {
            for trial in 0..opts.trials {
                let scale = LOGIT_SCALES[trial % LOGIT_SCALES.len()];
                let b = 1 + rng.below(4);
                let s = random_logits(rng, b, c, scale)?;
                let t = random_logits(rng, b, c, scale)?;
                let labels = random_labels(rng, b, c, false)?;
                let classical = kd_classical(&s, &t, lambda, false)?.loss;
                let decomposed =
                    opts.kd_decomposition_scale * kd_decomposed(&s, &t, lambda, labels.targets())?;
                worst.record((classical - decomposed).abs(), || {
                    case(lambda, &s, Some(&t), &labels)
                });
            }
        }
    }
    Ok(worst.finish())
}

fn ls_identity(opts: &VerifyOptions, rng: &mut SeededRng) -> Result<CheckResult> {
    let mut worst = Worst::new("label-smooth decomposition", IDENTITY_TOL);
    for &c in &CLASS_GRID {
        for &alpha_ls in &ALPHA_LS_GRID {
            for trial in 0..opts.trials {
                let scale = LOGIT_SCALES[trial % LOGIT_SCALES.len()];
                let b = 1 + rng.below(4);
                let s = random_logits(rng, b, c, scale)?;
                let labels = random_labels(rng, b, c, false)?;
                let direct = label_smooth_ce(&s, &labels, alpha_ls)?.loss;
                let decomposed = ls_decomposed(&s, labels.targets(), alpha_ls)?;
                worst.record((direct - decomposed).abs(), || {
                    case(alpha_ls, &s, None, &labels)
                });
            }
        }
    }
    Ok(worst.finish())
}

/// Renormalized non-target distributions of both student and teacher sum to
/// one. Rows where the teacher has no non-target mass are skipped.
fn normalization(opts: &VerifyOptions, rng: &mut SeededRng) -> Result<CheckResult> {
    let mut worst = Worst::new("non-target normalization", NORMALIZATION_TOL);
    for &c in &CLASS_GRID {
        for &lambda in &LAMBDA_GRID {
            for trial in 0..opts.trials {
                let scale = LOGIT_SCALES[trial % LOGIT_SCALES.len()];
                let s = random_logits(rng, 1, c, scale)?;
                let t = random_logits(rng, 1, c, scale)?;
                let target = rng.below(c);
                if softmax_row(t.row(0), lambda)?[target] >= 1.0 - DEGENERATE_EPS {
                    continue;
                }
                let sum = |m: &Matrix| -> Result<f64> {
                    let logs = log_softmax_row_excluding(m.row(0), lambda, target)?;
                    Ok((0..c).filter(|&i| i != target).map(|i| logs[i].exp()).sum())
                };
                let residual = (sum(&s)? - 1.0).abs().max((sum(&t)? - 1.0).abs());
                worst.record(residual, || Case {
                    lambda,
                    student: rows_of(&s),
                    teacher: rows_of(&t),
                    labels: vec![vec![target as f64]],
                });
            }
        }
    }
    Ok(worst.finish())
}

/// Which loss a gradient check exercises.
#[derive(Debug, Clone, Copy)]
enum GradLoss {
    Ce,
    LabelSmooth,
    KdClassical,
    Distributed,
    Soft,
    Nkd,
    TfNkd,
}

impl GradLoss {
    const ALL: [GradLoss; 7] = [
        GradLoss::Ce,
        GradLoss::LabelSmooth,
        GradLoss::KdClassical,
        GradLoss::Distributed,
        GradLoss::Soft,
        GradLoss::Nkd,
        GradLoss::TfNkd,
    ];

    fn check_name(self) -> &'static str {
        match self {
            GradLoss::Ce => "gradient ce",
            GradLoss::LabelSmooth => "gradient label-smooth ce",
            GradLoss::KdClassical => "gradient kd classical",
            GradLoss::Distributed => "gradient distributed",
            GradLoss::Soft => "gradient soft",
            GradLoss::Nkd => "gradient nkd",
            GradLoss::TfNkd => "gradient tfnkd (frozen weights)",
        }
    }
}

fn gradient_check(
    which: GradLoss,
    opts: &VerifyOptions,
    rng: &mut SeededRng,
) -> Result<CheckResult> {
    let mut worst = Worst::new(which.check_name(), GRADIENT_TOL);
    for trial in 0..opts.trials {
        let b = 1 + rng.below(4);
        let c = [2, 3, 5, 10][trial % 4];
        let lambda = LAMBDA_GRID[rng.below(LAMBDA_GRID.len())];
        let s = random_logits(rng, b, c, 2.0)?;
        let t = random_logits(rng, b, c, 2.0)?;
        let mixed = matches!(which, GradLoss::Ce | GradLoss::TfNkd);
        let labels = random_labels(rng, b, c, mixed)?;
        let targets = labels.targets().to_vec();
        let tt = teacher_target_probs(&t, &targets)?;
        let dc = DistillConfig {
            lambda,
            ..DistillConfig::default()
        };
        let lambda_sq = trial % 2 == 1;
        let alpha_ls = ALPHA_LS_GRID[trial % ALPHA_LS_GRID.len()];
        // weights are evaluated once and then held fixed
        let frozen = if let GradLoss::TfNkd = which {
            let strategy = WeightStrategy::TEACHER_FREE[trial % 6];
            let st = student_target_probs(&s, &targets)?;
            smooth_weight(&st, &labels.target_values(), strategy)?.weights
        } else {
            Vec::new()
        };
        let eval = |x: &Matrix| -> Result<(f64, Matrix)> {
            let out = match which {
                GradLoss::Ce => ce_loss(x, &labels)?,
                GradLoss::LabelSmooth => label_smooth_ce(x, &labels, alpha_ls)?,
                GradLoss::KdClassical => kd_classical(x, &t, lambda, lambda_sq)?,
                GradLoss::Distributed => distributed_loss(x, &t, lambda, &targets)?,
                GradLoss::Soft => soft_loss(x, &tt, &targets)?,
                GradLoss::Nkd => nkd_loss(x, &t, &labels, &dc)?.total,
                GradLoss::TfNkd => tfnkd_loss_with_weights(x, &labels, &frozen)?,
            };
            Ok((out.loss, out.grad))
        };
        let (_, analytic) = eval(&s)?;
        let numeric = numeric_gradient_matrix(|x| Ok(eval(x)?.0), &s, DEFAULT_STEP)?;
        let err = relative_error(analytic.data(), numeric.data());
        worst.record(err, || case(lambda, &s, Some(&t), &labels));
    }
    Ok(worst.finish())
}

/// Total combined loss and gradient against the sum of separately computed
/// terms, elementwise.
fn additivity(opts: &VerifyOptions, rng: &mut SeededRng) -> Result<CheckResult> {
    let mut worst = Worst::new("nkd additivity", ADDITIVITY_TOL);
    for trial in 0..opts.trials {
        let b = 1 + rng.below(8);
        let c = CLASS_GRID[trial % CLASS_GRID.len()];
        let lambda = LAMBDA_GRID[rng.below(LAMBDA_GRID.len())];
        let s = random_logits(rng, b, c, 3.0)?;
        let t = random_logits(rng, b, c, 3.0)?;
        let labels = random_labels(rng, b, c, false)?;
        let targets = labels.targets();
        let dc = DistillConfig {
            lambda,
            alpha: 0.5 + 2.0 * rng.uniform(),
            ..DistillConfig::default()
        };
        let total = nkd_loss(&s, &t, &labels, &dc)?.total;
        let ce = ce_loss(&s, &labels)?;
        let soft = soft_loss(&s, &teacher_target_probs(&t, targets)?, targets)?;
        let dist = distributed_loss(&s, &t, lambda, targets)?;
        let w = dc.distributed_weight();
        let mut residual = (total.loss - (ce.loss + soft.loss + w * dist.loss)).abs();
        for i in 0..b * c {
            let sum = ce.grad.data()[i] + soft.grad.data()[i] + w * dist.grad.data()[i];
            residual = residual.max((total.grad.data()[i] - sum).abs());
        }
        worst.record(residual, || case(lambda, &s, Some(&t), &labels));
    }
    Ok(worst.finish())
}

/// Adding a per-row constant to the logits leaves probabilities unchanged.
fn shift_invariance(opts: &VerifyOptions, rng: &mut SeededRng) -> Result<CheckResult> {
    let mut worst = Worst::new("softmax shift invariance", SHIFT_TOL);
    for trial in 0..opts.trials {
        let b = 1 + rng.below(4);
        let c = CLASS_GRID[trial % CLASS_GRID.len()];
        let lambda = LAMBDA_GRID[rng.below(LAMBDA_GRID.len())];
        let s = random_logits(rng, b, c, 5.0)?;
        let mut shifted = s.clone();
        for r in 0..b {
            let k = rng.normal(0.0, 50.0);
            shifted.row_mut(r).iter_mut().for_each(|v| *v += k);
        }
        let residual = softmax_temp(&s, lambda)?.max_abs_diff(&softmax_temp(&shifted, lambda)?)?;
        worst.record(residual, || Case {
            lambda,
            student: rows_of(&s),
            teacher: rows_of(&shifted),
            labels: Vec::new(),
        });
    }
    Ok(worst.finish())
}

/// Runs every check. Each check draws from its own RNG stream, so changing
/// one does not perturb the others.
pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let opts = VerifyOptions {
        trials: opts.trials.max(1),
        ..*opts
    };
    let stream = |k: u64| SeededRng::derive(opts.seed, 0x7665_7269_0000 + k);
    let mut checks = vec![
        kd_identity(&opts, &mut stream(0))?,
        ls_identity(&opts, &mut stream(1))?,
        normalization(&opts, &mut stream(2))?,
    ];
    for (k, which) in GradLoss::ALL.into_iter().enumerate() {
        checks.push(gradient_check(which, &opts, &mut stream(10 + k as u64))?);
    }
    checks.push(additivity(&opts, &mut stream(3))?);
    checks.push(shift_invariance(&opts, &mut stream(4))?);
    // the tf-NKD default path itself must agree with the frozen-weight path
    let mut rng = stream(5);
    let mut worst = Worst::new("tfnkd frozen-weight consistency", ADDITIVITY_TOL);
    for _ in 0..opts.trials {
        let s = random_logits(&mut rng, 4, 10, 2.0)?;
        let labels = random_labels(&mut rng, 4, 10, true)?;
        let out = tfnkd_loss(&s, &labels, WeightStrategy::default())?;
        let frozen = tfnkd_loss_with_weights(&s, &labels, &out.weights)?;
        let residual = (out.loss.loss - frozen.loss)
            .abs()
            .max(out.loss.grad.max_abs_diff(&frozen.grad)?);
        worst.record(residual, || case(1.0, &s, None, &labels));
    }
    checks.push(worst.finish());
    Ok(VerifyReport { checks })
}
