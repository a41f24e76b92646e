//! Optimization experiments: SGD with momentum, anchor-box regression
//! races across the loss family, and a tiny detector/segmenter trained on
//! synthetic cracks.

pub mod detector;
pub mod race;
pub mod toy;

pub use detector::{
    decode_box, decode_box_graph, DetectorConfig, DetectorOutputs, DetectorVars, Prediction,
    TinyDetector,
};
pub use race::{box_regression_race, RaceConfig, RaceLane};
pub use toy::{
    ablation_run, ema_series, eval_detector, robustness_run, train_toy, AblationRow, RobustKind,
    RobustRow, ToyConfig, ToyRun,
};

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SGD hyperparameters. `lr0` is constant over the run (no decay law).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.937,
            batch: 16,
            epochs: 30,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Invalid(alloc::format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid(alloc::format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Per-parameter momentum buffers.
#[derive(Debug, Clone)]
pub struct SgdState {
    v: Vec<Tensor>,
}

impl SgdState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Self {
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One update: v ← momentum·v + grad; param ← param − lr·v.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut SgdState,
    cfg: &SgdConfig,
) -> Result<()> {
    cfg.validate()?;
    if params.len() != grads.len() || params.len() != state.v.len() {
        return Err(Error::DataLength {
            expected: params.len(),
            got: grads.len().min(state.v.len()),
        });
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.v.iter_mut()) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        for i in 0..v.len() {
            let vi = cfg.momentum * v.data()[i] + g.data()[i];
            v.data_mut()[i] = vi;
            p.data_mut()[i] -= cfg.lr0 * vi;
        }
    }
    Ok(())
}

/// Per-step optimization history of one run or race lane.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTrace {
    /// Mean loss per step.
    pub loss: Vec<f64>,
    /// Mean IoU of the optimized boxes against their targets per step.
    pub mean_iou: Vec<f64>,
    /// First step index at which the tracked IoU statistic reached the
    /// target (0 when already there before any update), if ever.
    pub steps_to_target: Option<usize>,
}

impl ConvergenceTrace {
    pub fn len(&self) -> usize {
        self.loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss.is_empty()
    }
}
