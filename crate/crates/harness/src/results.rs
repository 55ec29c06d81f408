//! Sweep result rows, their CSV / JSON-lines sinks, and the median summary.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rimc_calib::cost::Method;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub rank: usize,
    pub rho: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub acc_teacher: f64,
    pub acc_drifted: f64,
    pub acc_calibrated: f64,
    pub gamma_total: f64,
    pub rram_writes: u64,
    pub sram_updates: u64,
    /// Kept out of the result files; see [`TimingRow`].
    #[serde(skip)]
    pub wall_ms: u64,
}

/// Identity of a row, used to skip finished cells when resuming.
pub type RowKey = (Method, usize, u64, usize, u64);

impl ResultRow {
    pub fn key(&self) -> RowKey {
        (self.method, self.rank, self.rho.to_bits(), self.n_samples, self.seed)
    }

    /// Share of the drift-induced accuracy loss won back by calibration.
    pub fn recovery(&self) -> Option<f64> {
        let drop = self.acc_teacher - self.acc_drifted;
        (drop > 0.0).then(|| (self.acc_calibrated - self.acc_drifted) / drop)
    }
}

pub fn key_of(method: Method, rank: usize, rho: f64, n_samples: usize, seed: u64) -> RowKey {
    (method, rank, rho.to_bits(), n_samples, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: Method,
    pub rank: usize,
    pub rho: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub method: Method,
    pub rank: usize,
    pub rho: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Jsonl,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        }
    }
}

/// Append-only sink for one kind of record.
pub struct Sink {
    path: PathBuf,
    format: Format,
    file: File,
    header_written: bool,
}

impl Sink {
    pub fn open(path: &Path, format: Format) -> Result<Self> {
        let header_written = path.metadata().map(|m| m.len() > 0).unwrap_or(false);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        Ok(Self { path: path.to_owned(), format, file, header_written })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        match self.format {
            Format::Jsonl => {
                serde_json::to_writer(&mut self.file, row)?;
                self.file.write_all(b"\n")?;
            }
            Format::Csv => {
                let mut w = csv::WriterBuilder::new().has_headers(!self.header_written).from_writer(Vec::new());
                w.serialize(row)?;
                self.file.write_all(&w.into_inner()?)?;
                self.header_written = true;
            }
        }
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_rows(path: &Path, format: Format) -> Result<Vec<ResultRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    match format {
        Format::Jsonl => BufReader::new(file)
            .lines()
            .filter(|l| l.as_ref().map(|l| !l.trim().is_empty()).unwrap_or(true))
            .map(|l| Ok(serde_json::from_str(&l?)?))
            .collect(),
        Format::Csv => csv::Reader::from_reader(file)
            .deserialize()
            .map(|r| r.with_context(|| format!("parsing {}", path.display())))
            .collect(),
    }
}

pub fn completed_keys(rows: &[ResultRow]) -> HashSet<RowKey> {
    rows.iter().map(ResultRow::key).collect()
}

/// Median of each metric over seeds, grouped by (method, rank, rho, n).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub rank: usize,
    pub rho: f64,
    pub n_samples: usize,
    pub seeds: usize,
    pub acc_teacher: f64,
    pub acc_drifted: f64,
    pub acc_calibrated: f64,
    pub gamma_total: f64,
    pub rram_writes: f64,
    pub sram_updates: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Method, usize, u64, usize), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method, r.rank, r.rho.to_bits(), r.n_samples)).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let med = |f: &dyn Fn(&ResultRow) -> f64| median(&mut g.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                method: g[0].method,
                rank: g[0].rank,
                rho: g[0].rho,
                n_samples: g[0].n_samples,
                seeds: g.len(),
                acc_teacher: med(&|r| r.acc_teacher),
                acc_drifted: med(&|r| r.acc_drifted),
                acc_calibrated: med(&|r| r.acc_calibrated),
                gamma_total: med(&|r| r.gamma_total),
                rram_writes: med(&|r| r.rram_writes as f64),
                sram_updates: med(&|r| r.sram_updates as f64),
            }
        })
        .collect()
}
