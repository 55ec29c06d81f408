//! Grid execution with resumable, deterministic result files.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use rimc_calib::nn::{load_model, save_model, train_teacher, StorageDtype, TrainReport};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::experiment::{run_cell, Cell, CellSettings, Setup};
use crate::results::{completed_keys, read_rows, summarize, FailureRow, Format, ResultRow, Sink, TimingRow};

pub const TEACHER_FILE: &str = "teacher.rimc";

/// Paths of everything a sweep writes under its output directory.
#[derive(Debug, Clone)]
pub struct OutputFiles {
    pub results: PathBuf,
    pub timing: PathBuf,
    pub failures: PathBuf,
    pub summary: PathBuf,
    pub config: PathBuf,
    pub models: PathBuf,
}

impl OutputFiles {
    pub fn new(dir: &Path, format: Format) -> Self {
        let ext = format.extension();
        Self {
            results: dir.join(format!("results.{ext}")),
            timing: dir.join(format!("timing.{ext}")),
            failures: dir.join(format!("failures.{ext}")),
            summary: dir.join(format!("summary.{ext}")),
            config: dir.join("config.toml"),
            models: dir.join("models"),
        }
    }
}

/// Loads the configured teacher file, or trains the preset on the dataset.
pub fn prepare_setup(cfg: &ExperimentConfig) -> Result<(Setup, Option<TrainReport>)> {
    let (train, test) = cfg.load_dataset()?;
    let (teacher, report) = match &cfg.model.file {
        Some(path) => (load_model(path).with_context(|| format!("loading teacher {}", path.display()))?, None),
        None => {
            let net = cfg.untrained_model(train.sample_shape(), train.num_classes)?;
            let (t, r) = train_teacher(&net, &train, &cfg.teacher)?;
            (t, Some(r))
        }
    };
    Ok((Setup::new(teacher, train, test)?, report))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SweepStats {
    pub cells: usize,
    pub skipped: usize,
    pub completed: usize,
    pub failed: usize,
}

fn cell_name(c: &Cell) -> String {
    format!("{:?}-r{}-rho{}-n{}-s{}", c.method, c.rank, c.rho, c.n_samples, c.seed).to_lowercase()
}

/// Runs every grid cell not already present in the results file.
///
/// Cells run in parallel on `workers` threads (0 = all cores), but rows are
/// appended in grid order, so the results file depends only on the config.
/// Wall-clock times go to the timing file and failed cells to the failures
/// file; a failing cell does not stop the sweep.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    setup: &Setup,
    out: &Path,
    format: Format,
    workers: usize,
) -> Result<SweepStats> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let files = OutputFiles::new(out, format);
    std::fs::write(&files.config, cfg.to_toml()).with_context(|| format!("writing {}", files.config.display()))?;
    let opts = RunOptions { format, workers, save_models: cfg.calibration.save_models };
    run_cells(&cfg.cells(), &cfg.settings(), setup, out, &opts)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub format: Format,
    pub workers: usize,
    pub save_models: bool,
}

/// [`run_sweep`] over an explicit cell list.
pub fn run_cells(
    cells: &[Cell],
    settings: &CellSettings,
    setup: &Setup,
    out: &Path,
    opts: &RunOptions,
) -> Result<SweepStats> {
    let format = opts.format;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let files = OutputFiles::new(out, format);
    let done = completed_keys(&read_rows(&files.results, format)?);
    let todo: Vec<Cell> = cells
        .iter()
        .copied()
        .filter(|c| !done.contains(&crate::results::key_of(c.method, c.rank, c.rho, c.n_samples, c.seed)))
        .collect();
    if opts.save_models {
        std::fs::create_dir_all(&files.models)?;
    }

    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.workers).build()?;
    let outcomes: Vec<std::result::Result<(ResultRow, Option<rimc_calib::nn::Network>), String>> = pool.install(|| {
        todo.par_iter()
            .map(|cell| {
                run_cell(setup, cell, settings)
                    .map(|o| (o.row, opts.save_models.then_some(o.calibrated)))
                    .map_err(|e| e.to_string())
            })
            .collect()
    });

    let mut results = Sink::open(&files.results, format)?;
    let mut timing = Sink::open(&files.timing, format)?;
    let mut failures: Option<Sink> = None;
    let mut stats = SweepStats { cells: cells.len(), skipped: cells.len() - todo.len(), ..Default::default() };
    for (cell, outcome) in todo.iter().zip(outcomes) {
        match outcome {
            Ok((row, net)) => {
                if let Some(net) = net {
                    save_model(&net, files.models.join(format!("{}.rimc", cell_name(cell))), StorageDtype::F64)?;
                }
                results.write(&row)?;
                timing.write(&TimingRow {
                    method: row.method,
                    rank: row.rank,
                    rho: row.rho,
                    n_samples: row.n_samples,
                    seed: row.seed,
                    wall_ms: row.wall_ms,
                })?;
                stats.completed += 1;
            }
            Err(error) => {
                let sink = match &mut failures {
                    Some(s) => s,
                    None => failures.insert(Sink::open(&files.failures, format)?),
                };
                sink.write(&FailureRow {
                    method: cell.method,
                    rank: cell.rank,
                    rho: cell.rho,
                    n_samples: cell.n_samples,
                    seed: cell.seed,
                    error,
                })?;
                stats.failed += 1;
            }
        }
    }
    write_summary(&files, format)?;
    Ok(stats)
}

/// Rewrites the summary from every row in the results file.
pub fn write_summary(files: &OutputFiles, format: Format) -> Result<()> {
    let rows = read_rows(&files.results, format)?;
    if files.summary.exists() {
        std::fs::remove_file(&files.summary)?;
    }
    let mut sink = Sink::open(&files.summary, format)?;
    for s in summarize(&rows) {
        sink.write(&s)?;
    }
    Ok(())
}
