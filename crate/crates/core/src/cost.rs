//! Analytical endurance, lifespan, latency and speed model for comparing
//! backpropagation (RRAM rewrites) with adapter calibration (SRAM writes).

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Backprop,
    Dora,
    Lora,
}

impl Method {
    /// Whether calibration updates are written to the crossbar.
    pub fn writes_rram(self) -> bool {
        matches!(self, Method::Backprop)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub rram_endurance: u64,
    pub sram_endurance: u64,
    pub rram_write_ns: f64,
    /// How many times faster an SRAM write is than an RRAM write.
    pub sram_rram_speed_ratio: u64,
    pub params_total: u64,
    pub params_trainable: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            rram_endurance: 100_000_000,
            sram_endurance: 10_000_000_000_000_000,
            rram_write_ns: 100.0,
            sram_rram_speed_ratio: 100,
            params_total: 1,
            params_trainable: 1,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if self.rram_endurance == 0 || self.sram_endurance == 0 || self.sram_rram_speed_ratio == 0 {
            return Err(Error::param("endurance and speed ratio must be positive"));
        }
        if !(self.rram_write_ns > 0.0) {
            return Err(Error::param(format!("rram_write_ns = {}", self.rram_write_ns)));
        }
        if self.params_trainable > self.params_total {
            return Err(Error::param(format!(
                "{} trainable of {} total parameters",
                self.params_trainable, self.params_total
            )));
        }
        Ok(())
    }

    pub fn endurance(&self, method: Method) -> u64 {
        if method.writes_rram() {
            self.rram_endurance
        } else {
            self.sram_endurance
        }
    }
}

/// Weight-update events in one calibration: `epochs · ⌈n_samples / batch⌉`.
pub fn updates_per_calibration(epochs: u64, n_samples: u64, batch: u64) -> Result<u64> {
    if batch == 0 {
        return Err(Error::param("batch must be ≥ 1"));
    }
    Ok(epochs * n_samples.div_ceil(batch))
}

/// Whole calibrations before the written memory wears out:
/// `⌊endurance / updates_per_cal⌋`.
pub fn lifespan_calibrations(cm: &CostModel, method: Method, updates_per_cal: u64) -> Result<u64> {
    if updates_per_cal == 0 {
        return Err(Error::param("lifespan is undefined for zero updates per calibration"));
    }
    Ok(cm.endurance(method) / updates_per_cal)
}

/// `endurance / updates_per_cal` rounded half up, the convention used by
/// published tables.
pub fn lifespan_rounded(cm: &CostModel, method: Method, updates_per_cal: u64) -> Result<u64> {
    if updates_per_cal == 0 {
        return Err(Error::param("lifespan is undefined for zero updates per calibration"));
    }
    Ok(Ratio::new(cm.endurance(method), updates_per_cal).round().to_integer())
}

/// Cell-serial rewrite time of `params` cells.
pub fn update_time_seconds(params: u64, write_ns: f64) -> f64 {
    params as f64 * write_ns / 1e9
}

/// [`update_time_seconds`] for integral write times, exact.
pub fn update_time_exact(params: u64, write_ns: u64) -> Ratio<u64> {
    Ratio::new(params * write_ns, 1_000_000_000)
}

/// `(1 / dataset_fraction) · speed_ratio`, exact.
pub fn speedup_exact(dataset_fraction: Ratio<u64>, speed_ratio: u64) -> Result<Ratio<u64>> {
    if *dataset_fraction.numer() == 0 || dataset_fraction > Ratio::from_integer(1) {
        return Err(Error::param(format!("dataset fraction {dataset_fraction} outside (0, 1]")));
    }
    Ok(dataset_fraction.recip() * speed_ratio)
}

/// Floating-point form of [`speedup_exact`] for arbitrary fractions.
pub fn speedup_factor(cm: &CostModel, dataset_fraction: f64) -> Result<f64> {
    if !(dataset_fraction > 0.0 && dataset_fraction <= 1.0) {
        return Err(Error::param(format!("dataset fraction {dataset_fraction} outside (0, 1]")));
    }
    Ok(cm.sram_rram_speed_ratio as f64 / dataset_fraction)
}

/// Inputs of the backprop-vs-adapter comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TableSpec {
    pub epochs: u64,
    /// Calibration set size listed for backpropagation.
    pub backprop_samples: u64,
    /// Sample count behind the backprop lifespan figure.
    pub backprop_lifespan_samples: u64,
    pub adapter_samples: u64,
    pub batch: u64,
    /// Adapter parameters over weight parameters.
    pub gamma: f64,
    /// Where `gamma` came from, e.g. a measured network or a published value.
    pub gamma_label: String,
}

impl Default for TableSpec {
    fn default() -> Self {
        Self {
            epochs: 20,
            backprop_samples: 125,
            backprop_lifespan_samples: 120,
            adapter_samples: 10,
            batch: 1,
            gamma: 0.0234,
            gamma_label: "reference (ResNet-50, r=4)".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: Method,
    pub dataset_size: u64,
    pub trainable_fraction: f64,
    pub trainable_label: String,
    /// Speed relative to backpropagation, as `"num/den"` when not integral.
    pub speed: String,
    pub updates_per_calibration: u64,
    pub written_memory: String,
    pub lifespan_floor: u64,
    pub lifespan_rounded: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub rows: Vec<TableRow>,
}

fn ratio_str(r: Ratio<u64>) -> String {
    if r.is_integer() {
        r.to_integer().to_string()
    } else {
        r.to_string()
    }
}

pub fn cost_table(cm: &CostModel, spec: &TableSpec) -> Result<CostTable> {
    cm.validate()?;
    if spec.backprop_samples == 0 || spec.adapter_samples == 0 || spec.adapter_samples > spec.backprop_samples {
        return Err(Error::param(format!(
            "sample counts {} (backprop) / {} (adapter)",
            spec.backprop_samples, spec.adapter_samples
        )));
    }
    let bp_updates = updates_per_calibration(spec.epochs, spec.backprop_lifespan_samples, spec.batch)?;
    let ad_updates = updates_per_calibration(spec.epochs, spec.adapter_samples, spec.batch)?;
    let fraction = Ratio::new(spec.adapter_samples, spec.backprop_samples);
    let speed = speedup_exact(fraction, cm.sram_rram_speed_ratio)?;
    Ok(CostTable {
        rows: vec![
            TableRow {
                method: Method::Backprop,
                dataset_size: spec.backprop_samples,
                trainable_fraction: 1.0,
                trainable_label: "all weights".into(),
                speed: "1".into(),
                updates_per_calibration: bp_updates,
                written_memory: "rram".into(),
                lifespan_floor: lifespan_calibrations(cm, Method::Backprop, bp_updates)?,
                lifespan_rounded: lifespan_rounded(cm, Method::Backprop, bp_updates)?,
            },
            TableRow {
                method: Method::Dora,
                dataset_size: spec.adapter_samples,
                trainable_fraction: spec.gamma,
                trainable_label: spec.gamma_label.clone(),
                speed: ratio_str(speed),
                updates_per_calibration: ad_updates,
                written_memory: "sram".into(),
                lifespan_floor: lifespan_calibrations(cm, Method::Dora, ad_updates)?,
                lifespan_rounded: lifespan_rounded(cm, Method::Dora, ad_updates)?,
            },
        ],
    })
}

/// Renders `n` as `m×10^e` when it is a multiple of a large power of ten.
fn sci(n: u64) -> String {
    if n < 1_000_000 {
        return n.to_string();
    }
    let (mut m, mut e) = (n, 0);
    while m % 10 == 0 {
        m /= 10;
        e += 1;
    }
    if m < 1000 {
        format!("{m}×10^{e}")
    } else {
        n.to_string()
    }
}

impl CostTable {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let header = ["method", "dataset", "trainable", "speed", "updates/cal", "memory", "lifespan (calibrations)"];
        let rows: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                let lifespan = if r.lifespan_rounded == r.lifespan_floor {
                    sci(r.lifespan_floor)
                } else {
                    format!("{} (rounded: {})", sci(r.lifespan_floor), sci(r.lifespan_rounded))
                };
                [
                    serde_json::to_value(r.method).unwrap().as_str().unwrap().to_string(),
                    r.dataset_size.to_string(),
                    format!("{:.2}% [{}]", 100.0 * r.trainable_fraction, r.trainable_label),
                    format!("{}x", r.speed),
                    r.updates_per_calibration.to_string(),
                    r.written_memory.clone(),
                    lifespan,
                ]
            })
            .collect();
        let widths: Vec<usize> =
            (0..7).map(|c| rows.iter().map(|r| r[c].chars().count()).chain([header[c].len()]).max().unwrap()).collect();
        let line = |cells: &[&str]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        writeln!(out, "{}", line(&header)).unwrap();
        for r in &rows {
            let cells: Vec<&str> = r.iter().map(String::as_str).collect();
            writeln!(out, "{}", line(&cells)).unwrap();
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,dataset_size,trainable_fraction,trainable_label,speed,updates_per_calibration,written_memory,lifespan_floor,lifespan_rounded\n",
        );
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},\"{}\",{},{},{},{},{}",
                serde_json::to_value(r.method).unwrap().as_str().unwrap(),
                r.dataset_size,
                r.trainable_fraction,
                r.trainable_label.replace('"', "\"\""),
                r.speed,
                r.updates_per_calibration,
                r.written_memory,
                r.lifespan_floor,
                r.lifespan_rounded
            )
            .unwrap();
        }
        out
    }
}
