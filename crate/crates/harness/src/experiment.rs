//! One experiment cell: deploy a trained teacher with drift, calibrate the
//! student with the chosen method, and measure accuracy and write traffic.

use std::time::Instant;

use rimc_calib::adapters::{Adapter, AdapterKind, DoraMode, QuantizedAdapter};
use rimc_calib::calibration::{
    backprop_baseline, calibrate_network, extract_teacher_features, Accuracies, BackpropConfig, CalibConfig,
    CalibrationReport,
};
use rimc_calib::cost::Method;
use rimc_calib::nn::{deploy_to_rimc, evaluate, Dataset, Network};
use rimc_calib::rram::{DriftSpec, ProgramSpec};
use rimc_calib::{Result, RngStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::results::ResultRow;

/// Stream index (under the cell seed) that orders the calibration samples.
const CALIB_SUBSET_STREAM: u64 = 0xCA11B;

/// Trained teacher plus its data.
#[derive(Debug, Clone)]
pub struct Setup {
    pub teacher: Network,
    pub train: Dataset,
    pub test: Dataset,
    pub acc_teacher: f64,
}

impl Setup {
    pub fn new(teacher: Network, train: Dataset, test: Dataset) -> Result<Self> {
        let acc_teacher = evaluate(&teacher, &test)?;
        Ok(Self { teacher, train, test, acc_teacher })
    }
}

/// Coordinates of one sweep cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    pub rank: usize,
    pub rho: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// Settings shared by every cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellSettings {
    pub calib: CalibConfig,
    pub backprop: BackpropConfig,
    pub prog: ProgramSpec,
    pub g_max: f64,
    pub mu_rel: f64,
    /// Store adapters as int8 for the final evaluation.
    pub int8_adapters: bool,
}

impl Default for CellSettings {
    fn default() -> Self {
        Self {
            calib: CalibConfig::default(),
            backprop: BackpropConfig::default(),
            prog: ProgramSpec::ideal(),
            g_max: rimc_calib::rram::DEFAULT_G_MAX,
            mu_rel: 0.0,
            int8_adapters: false,
        }
    }
}

pub struct CellOutcome {
    pub row: ResultRow,
    pub report: CalibrationReport,
    pub drifted: Network,
    pub calibrated: Network,
}

/// The first `n` samples of a seed-dependent permutation of the training
/// set, so smaller calibration sets are prefixes of larger ones.
pub fn calibration_samples(train: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    train.calibration_subset(n, &mut RngStream::derive(seed, CALIB_SUBSET_STREAM))
}

pub fn deploy(setup: &Setup, cell: &Cell, s: &CellSettings) -> Result<Network> {
    let drift = DriftSpec { rho: cell.rho, mu_rel: s.mu_rel, seed: cell.seed };
    deploy_to_rimc(&setup.teacher, &drift, &s.prog, s.g_max)
}

/// Replaces every DoRA adapter with its int8 form.
pub fn quantize_adapters(net: &Network) -> Result<Network> {
    let mut out = net.clone();
    for layer in &mut out.layers {
        if let Some(w) = layer.weighted_mut() {
            if let Some(Adapter::Dora(d)) = &w.adapter {
                w.adapter = Some(Adapter::QuantizedDora(QuantizedAdapter::quantize(d)?));
            }
        }
    }
    Ok(out)
}

/// Folds every DoRA adapter's normalization into a fixed per-column scale.
/// Activation-norm adapters take their norms from the network's own layer
/// inputs on `calib_inputs`.
pub fn merge_adapters(net: &Network, calib_inputs: &Tensor) -> Result<Network> {
    let (_, caps) = net.forward(calib_inputs, true)?;
    let caps = caps.unwrap_or_default();
    let mut out = net.clone();
    for cap in caps {
        let w = out.layers[cap.layer_index].weighted_mut().expect("captured layers are weighted");
        if let Some(Adapter::Dora(d)) = &w.adapter {
            let x = (d.mode == DoraMode::ActivationNorm).then_some(&cap.input);
            let merged = d.merge_for_inference(&w.weight.effective(), x).map_err(|e| e.at_layer(cap.layer_index))?;
            w.adapter = Some(Adapter::Dora(merged));
        }
    }
    Ok(out)
}

pub fn run_cell(setup: &Setup, cell: &Cell, s: &CellSettings) -> Result<CellOutcome> {
    let start = Instant::now();
    let drifted = deploy(setup, cell, s)?;
    let mut out = calibrate_student(setup, drifted, cell, s)?;
    out.row.wall_ms = start.elapsed().as_millis() as u64;
    Ok(out)
}

/// Calibrates an already deployed student. `cell.rho` is only recorded.
pub fn calibrate_student(setup: &Setup, drifted: Network, cell: &Cell, s: &CellSettings) -> Result<CellOutcome> {
    let start = Instant::now();
    let acc_drifted = evaluate(&drifted, &setup.test)?;
    let calib = calibration_samples(&setup.train, cell.n_samples, cell.seed)?;
    let (calibrated, mut report) = match cell.method {
        Method::Dora | Method::Lora => {
            let cfg = CalibConfig {
                rank: cell.rank,
                n_calib_samples: cell.n_samples,
                adapter_kind: if cell.method == Method::Dora { AdapterKind::Dora } else { AdapterKind::Lora },
                seed: cell.seed,
                ..s.calib.clone()
            };
            let cache = extract_teacher_features(&setup.teacher, &calib)?;
            let (net, report) = calibrate_network(&drifted, &cache, &cfg)?;
            if s.int8_adapters {
                (quantize_adapters(&net)?, report)
            } else {
                (net, report)
            }
        }
        Method::Backprop => {
            let cfg = BackpropConfig { seed: cell.seed, ..s.backprop.clone() };
            backprop_baseline(&drifted, &calib, &cfg, &s.prog)?
        }
    };
    let acc_calibrated = evaluate(&calibrated, &setup.test)?;
    report.accuracy = Some(Accuracies { teacher: setup.acc_teacher, drifted: acc_drifted, calibrated: acc_calibrated });
    let row = ResultRow {
        method: cell.method,
        rank: if cell.method == Method::Backprop { 0 } else { cell.rank },
        rho: cell.rho,
        n_samples: cell.n_samples,
        seed: cell.seed,
        acc_teacher: setup.acc_teacher,
        acc_drifted,
        acc_calibrated,
        gamma_total: report.gamma_total_f64,
        rram_writes: report.rram_writes,
        sram_updates: report.sram_updates,
        wall_ms: start.elapsed().as_millis() as u64,
    };
    Ok(CellOutcome { row, report, drifted, calibrated })
}
