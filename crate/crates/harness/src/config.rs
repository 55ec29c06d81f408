//! Versioned TOML experiment description.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rimc_calib::calibration::{BackpropConfig, CalibConfig};
use rimc_calib::cost::{CostModel, Method, TableSpec};
use rimc_calib::nn::{
    preset_cnn, preset_mlp, read_csv, read_idx_images, read_idx_labels, BlobsSpec, Dataset, Network, Split, TrainConfig,
};
use rimc_calib::rram::{ProgramSpec, DEFAULT_G_MAX};
use rimc_calib::RngStream;
use serde::{Deserialize, Serialize};

use crate::experiment::{Cell, CellSettings};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub teacher: TrainConfig,
    #[serde(default)]
    pub drift: DriftSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub backprop: BackpropConfig,
    #[serde(default)]
    pub cost: CostSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `"mlp"` or `"cnn"`; ignored when `file` is set.
    #[serde(default = "default_preset")]
    pub preset: String,
    /// A saved teacher to use instead of training one.
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_preset() -> String {
    "mlp".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs(BlobsSpec),
    Idx { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf, classes: usize },
    Csv { train: PathBuf, test: PathBuf, shape: Vec<usize>, classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftSection {
    pub rhos: Vec<f64>,
    pub mu_rel: f64,
    pub seeds: Vec<u64>,
    pub g_max: f64,
    pub program: ProgramSpec,
}

impl Default for DriftSection {
    fn default() -> Self {
        Self { rhos: vec![0.2], mu_rel: 0.0, seeds: vec![0], g_max: DEFAULT_G_MAX, program: ProgramSpec::ideal() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub methods: Vec<Method>,
    pub ranks: Vec<usize>,
    pub n_samples: Vec<usize>,
    /// Store DoRA adapters as int8 before the final evaluation.
    pub int8_adapters: bool,
    /// Write every calibrated network of a sweep under `<out>/models`.
    pub save_models: bool,
    /// Everything else; `rank`, `n_calib_samples`, `adapter_kind` and `seed`
    /// are taken from the sweep cell.
    pub settings: CalibConfig,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Dora],
            ranks: vec![4],
            n_samples: vec![10],
            int8_adapters: false,
            save_models: false,
            settings: CalibConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    pub model: CostModel,
    pub table: TableSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.version == CONFIG_VERSION,
            "config version {} is not supported (expected {CONFIG_VERSION})",
            self.version
        );
        ensure!(
            self.model.file.is_some() || matches!(self.model.preset.as_str(), "mlp" | "cnn"),
            "unknown model preset {:?} (expected \"mlp\" or \"cnn\")",
            self.model.preset
        );
        let c = &self.calibration;
        ensure!(!self.drift.rhos.is_empty(), "drift.rhos is empty");
        ensure!(!self.drift.seeds.is_empty(), "drift.seeds is empty");
        ensure!(!c.methods.is_empty(), "calibration.methods is empty");
        ensure!(!c.ranks.is_empty(), "calibration.ranks is empty");
        ensure!(!c.n_samples.is_empty(), "calibration.n_samples is empty");
        for &rho in &self.drift.rhos {
            ensure!(rho >= 0.0 && rho.is_finite(), "drift rho {rho} must be finite and ≥ 0");
        }
        ensure!(c.ranks.iter().chain(&c.n_samples).all(|&v| v > 0), "ranks and sample counts must be ≥ 1");
        ensure!(self.drift.g_max > 0.0, "g_max must be positive");
        self.drift.program.validate()?;
        c.settings.validate()?;
        self.backprop.validate()?;
        self.cost.model.validate()?;
        Ok(())
    }

    pub fn settings(&self) -> CellSettings {
        CellSettings {
            calib: self.calibration.settings.clone(),
            backprop: self.backprop.clone(),
            prog: self.drift.program,
            g_max: self.drift.g_max,
            mu_rel: self.drift.mu_rel,
            int8_adapters: self.calibration.int8_adapters,
        }
    }

    /// The sweep grid in a fixed order. Backprop ignores rank, so it
    /// contributes one cell per (rho, n_samples, seed) with rank 0.
    pub fn cells(&self) -> Vec<Cell> {
        let c = &self.calibration;
        let mut out = Vec::new();
        for &method in &c.methods {
            let ranks: &[usize] = if method == Method::Backprop { &[0] } else { &c.ranks };
            for &rank in ranks {
                for &rho in &self.drift.rhos {
                    for &n_samples in &c.n_samples {
                        for &seed in &self.drift.seeds {
                            out.push(Cell { method, rank, rho, n_samples, seed });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn untrained_model(&self, sample_shape: &[usize], classes: usize) -> Result<Network> {
        let mut rng = RngStream::new(self.model.init_seed);
        Ok(match self.model.preset.as_str() {
            "mlp" => preset_mlp(sample_shape.iter().product(), classes, &mut rng)?,
            "cnn" => preset_cnn(sample_shape, classes, &mut rng)?,
            other => bail!("unknown model preset {other:?}"),
        })
    }

    /// Returns `(train, test)`.
    pub fn load_dataset(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSpec::Blobs(spec) => Ok(spec.generate()?),
            DatasetSpec::Idx { train_images, train_labels, test_images, test_labels, classes } => {
                let read = |images: &Path, labels: &Path, split: Split| -> Result<Dataset> {
                    let x = read_idx_images(open(images)?)?;
                    let y = read_idx_labels(open(labels)?)?;
                    Ok(Dataset::new(x, y, *classes)?.with_split(split))
                };
                Ok((read(train_images, train_labels, Split::Train)?, read(test_images, test_labels, Split::Test)?))
            }
            DatasetSpec::Csv { train, test, shape, classes } => {
                let read = |p: &Path, split: Split| -> Result<Dataset> {
                    Ok(read_csv(BufReader::new(open(p)?), shape, *classes)?.with_split(split))
                };
                Ok((read(train, Split::Train)?, read(test, Split::Test)?))
            }
        }
    }
}

fn open(p: &Path) -> Result<File> {
    File::open(p).with_context(|| format!("opening {}", p.display()))
}
