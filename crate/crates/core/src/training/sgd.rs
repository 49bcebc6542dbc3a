use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelParams, ParamGrads};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `gamma` at each milestone epoch (0-based epoch index).
    Step {
        milestones: Vec<usize>,
        gamma: f64,
    },
    /// Half-cosine from `lr` at epoch 0 towards 0 at `epochs`.
    Cosine,
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Step { milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                base * gamma.powi(passed as i32)
            }
            LrSchedule::Cosine => {
                base * 0.5 * (1.0 + (PI * epoch as f64 / epochs.max(1) as f64).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MixupMode {
    Off,
    Fixed {
        lam: f64,
    },
    /// `lam ~ Beta(alpha, alpha)`, drawn once per batch.
    Beta {
        alpha: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub seed: u64,
    /// `k` of the top-k metric (clamped to the class count).
    pub topk: usize,
    pub mixup: MixupMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            lr_schedule: LrSchedule::Step {
                milestones: vec![30, 45],
                gamma: 0.1,
            },
            weight_decay: 0.0,
            seed: 0,
            topk: 5,
            mixup: MixupMode::Off,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.topk == 0 {
            return Err(Error::Config("topk must be at least 1".into()));
        }
        match self.mixup {
            MixupMode::Fixed { lam } if !(0.0..=1.0).contains(&lam) => {
                return Err(Error::Config(format!(
                    "mixup lam must lie in [0, 1], got {lam}"
                )))
            }
            MixupMode::Beta { alpha } if !(alpha.is_finite() && alpha > 0.0) => {
                return Err(Error::Config(format!(
                    "mixup alpha must be positive, got {alpha}"
                )))
            }
            _ => {}
        }
        if let LrSchedule::Step { gamma, .. } = self.lr_schedule {
            if !(gamma.is_finite() && gamma > 0.0) {
                return Err(Error::Config(format!(
                    "step gamma must be positive, got {gamma}"
                )));
            }
        }
        Ok(())
    }
}

/// Momentum buffers, one per layer, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    velocity: Vec<(Matrix, Vec<f64>)>,
}

impl SgdState {
    pub fn new(params: &ModelParams) -> Self {
        SgdState {
            velocity: params
                .layers()
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.weight.rows(), l.weight.cols()),
                        vec![0.0; l.bias.len()],
                    )
                })
                .collect(),
        }
    }
}

/// `v = momentum v + g + wd p`, `p -= lr v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite parameter gradient".into()));
    }
    if grads.layers.len() != state.velocity.len() || grads.layers.len() != params.layers().len() {
        return Err(Error::Dimension(
            "gradient / optimizer state layer count".into(),
        ));
    }
    for ((layer, grad), (vw, vb)) in params
        .layers_mut()
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.velocity.iter_mut())
    {
        if layer.weight.shape() != grad.weight.shape() {
            return Err(Error::Dimension(
                "gradient shape does not match weights".into(),
            ));
        }
        for ((v, g), p) in vw
            .data_mut()
            .iter_mut()
            .zip(grad.weight.data())
            .zip(layer.weight.data())
        {
            *v = momentum * *v + g + weight_decay * p;
        }
        for ((v, g), p) in vb.iter_mut().zip(&grad.bias).zip(&layer.bias) {
            *v = momentum * *v + g + weight_decay * p;
        }
        for (p, v) in layer.weight.data_mut().iter_mut().zip(vw.data()) {
            *p -= lr * v;
        }
        for (p, v) in layer.bias.iter_mut().zip(vb.iter()) {
            *p -= lr * v;
        }
        if !layer.weight.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Numeric("parameters diverged after update".into()));
        }
    }
    Ok(())
}
