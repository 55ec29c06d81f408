use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, DoraMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Settings for feature-based adapter calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    /// Maximum epochs `N`.
    pub epochs: usize,
    /// Stop once the full-set loss is at or below this value.
    pub loss_threshold: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Samples per optimizer step.
    pub batch: usize,
    pub n_calib_samples: usize,
    pub rank: usize,
    pub adapter_kind: AdapterKind,
    pub mode: DoraMode,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            loss_threshold: 1e-6,
            lr: 1e-3,
            optimizer: OptimizerKind::default(),
            batch: 1,
            n_calib_samples: 10,
            rank: 4,
            adapter_kind: AdapterKind::Dora,
            mode: DoraMode::WeightNorm,
            seed: 0,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("calibration needs at least one epoch"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::param(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 || self.n_calib_samples == 0 || self.rank == 0 {
            return Err(Error::param(format!(
                "batch={}, n_calib_samples={}, rank={} must all be ≥ 1",
                self.batch, self.n_calib_samples, self.rank
            )));
        }
        if !(self.loss_threshold >= 0.0) {
            return Err(Error::param("loss_threshold must be ≥ 0"));
        }
        self.optimizer.validate()
    }
}

impl OptimizerKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::Sgd => Ok(()),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                    return Err(Error::param(format!("adam β₁={beta1}, β₂={beta2}, ε={eps}")));
                }
                Ok(())
            }
        }
    }
}

/// Settings for the full-backpropagation baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackpropConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch: usize,
    pub seed: u64,
}

impl Default for BackpropConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 1e-2, optimizer: OptimizerKind::Sgd, batch: 1, seed: 0 }
    }
}

impl BackpropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() || self.batch == 0 {
            return Err(Error::param(format!("lr={}, batch={}", self.lr, self.batch)));
        }
        self.optimizer.validate()
    }
}
