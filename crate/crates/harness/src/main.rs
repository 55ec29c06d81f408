use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rimc_calib::cost::cost_table;
use rimc_calib::nn::{evaluate, load_model, save_model, StorageDtype};
use rimc_harness::config::ExperimentConfig;
use rimc_harness::experiment::{calibrate_student, deploy, Cell, Setup};
use rimc_harness::results::{Format, Sink};
use rimc_harness::sweep::{prepare_setup, run_sweep, TEACHER_FILE};

/// RRAM drift simulation and adapter calibration experiments.
#[derive(Parser)]
#[command(name = "rimc", version)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Result file format.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher on the configured dataset and save it.
    TrainTeacher,
    /// Program a teacher onto crossbars, apply drift and save the student.
    Deploy {
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Drift level (defaults to the first configured rho).
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Calibrate a deployed student with every configured method, rank and
    /// sample count.
    Calibrate {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Drift level recorded in the result rows.
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Run the full grid; finished cells are skipped.
    Sweep,
    /// Print the backprop-versus-adapter cost table.
    Cost,
    /// Test accuracy of a saved model.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let Some(path) = &cli.config else { bail!(UsageError("--config is required for this command".into())) };
    let mut cfg =
        ExperimentConfig::load(path).map_err(|e| e.context(UsageError(format!("bad config {}", path.display()))))?;
    if let Some(seed) = cli.seed {
        cfg.drift.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn run(cli: &Cli) -> Result<()> {
    let format = cli.format.unwrap_or_default();
    match &cli.command {
        Command::TrainTeacher => {
            let cfg = load_config(cli)?;
            create_dir(&cfg.out)?;
            let (setup, report) = prepare_setup(&cfg)?;
            let path = cfg.out.join(TEACHER_FILE);
            save_model(&setup.teacher, &path, StorageDtype::F64)?;
            if let Some(r) = report {
                std::fs::write(cfg.out.join("teacher_report.json"), serde_json::to_string_pretty(&r)?)?;
            }
            println!("teacher test accuracy {:.4}", setup.acc_teacher);
            println!("saved {}", path.display());
        }
        Command::Deploy { teacher, rho } => {
            let cfg = load_config(cli)?;
            create_dir(&cfg.out)?;
            let teacher_path = teacher.clone().unwrap_or_else(|| cfg.out.join(TEACHER_FILE));
            let (train, test) = cfg.load_dataset()?;
            let setup = Setup::new(load_model(&teacher_path)?, train, test)?;
            let cell = Cell {
                method: rimc_calib::cost::Method::Dora,
                rank: 0,
                rho: rho.unwrap_or(cfg.drift.rhos[0]),
                n_samples: 0,
                seed: cfg.drift.seeds[0],
            };
            let student = deploy(&setup, &cell, &cfg.settings())?;
            let path = cfg.out.join("student.rimc");
            save_model(&student, &path, StorageDtype::F64)?;
            println!("teacher accuracy {:.4}", setup.acc_teacher);
            println!("drifted accuracy {:.4} (rho {}, seed {})", evaluate(&student, &setup.test)?, cell.rho, cell.seed);
            println!("saved {}", path.display());
        }
        Command::Calibrate { student, teacher, rho } => {
            let cfg = load_config(cli)?;
            let teacher_path = teacher.clone().unwrap_or_else(|| cfg.out.join(TEACHER_FILE));
            let (train, test) = cfg.load_dataset()?;
            let setup = Setup::new(load_model(&teacher_path)?, train, test)?;
            let drifted = load_model(student)?;
            let rho = rho.unwrap_or(cfg.drift.rhos[0]);
            let seed = cfg.drift.seeds[0];
            let reports = cfg.out.join("reports");
            create_dir(&reports)?;
            let mut rows = Sink::open(&cfg.out.join(format!("calibration.{}", format.extension())), format)?;
            for cell in cfg.cells().into_iter().filter(|c| c.rho == cfg.drift.rhos[0] && c.seed == seed) {
                let cell = Cell { rho, ..cell };
                let out = calibrate_student(&setup, drifted.clone(), &cell, &cfg.settings())?;
                let name = format!("{:?}-r{}-n{}-s{}", cell.method, out.row.rank, cell.n_samples, seed).to_lowercase();
                std::fs::write(reports.join(format!("{name}.json")), out.report.to_json())?;
                save_model(&out.calibrated, reports.join(format!("{name}.rimc")), StorageDtype::F64)?;
                rows.write(&out.row)?;
                println!(
                    "{name}: drifted {:.4} -> calibrated {:.4}, rram writes {}, sram updates {}",
                    out.row.acc_drifted, out.row.acc_calibrated, out.row.rram_writes, out.row.sram_updates
                );
            }
            println!("rows appended to {}", rows.path().display());
        }
        Command::Sweep => {
            let cfg = load_config(cli)?;
            create_dir(&cfg.out)?;
            let (setup, _) = prepare_setup(&cfg)?;
            save_model(&setup.teacher, cfg.out.join(TEACHER_FILE), StorageDtype::F64)?;
            let stats = run_sweep(&cfg, &setup, &cfg.out, format, cli.workers)?;
            println!(
                "{} cells: {} completed, {} skipped, {} failed ({})",
                stats.cells,
                stats.completed,
                stats.skipped,
                stats.failed,
                cfg.out.display()
            );
            if stats.failed > 0 {
                bail!(NumericError(format!("{} cells failed; see failures.{}", stats.failed, format.extension())));
            }
        }
        Command::Cost => {
            let (model, table) = match &cli.config {
                Some(_) => {
                    let cfg = load_config(cli)?;
                    (cfg.cost.model, cfg.cost.table)
                }
                None => Default::default(),
            };
            let t = cost_table(&model, &table)?;
            match cli.format {
                None => print!("{}", t.to_text()),
                Some(Format::Csv) => print!("{}", t.to_csv()),
                Some(Format::Jsonl) => println!("{}", serde_json::to_string(&t)?),
            }
        }
        Command::Eval { model } => {
            let cfg = load_config(cli)?;
            let (_, test) = cfg.load_dataset()?;
            println!("{:.4}", evaluate(&load_model(model)?, &test)?);
        }
    }
    Ok(())
}

#[derive(Debug)]
struct NumericError(String);

impl std::fmt::Display for NumericError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericError {}

/// 1 usage, 2 I/O, 3 numeric.
fn exit_code(err: &anyhow::Error) -> u8 {
    use rimc_calib::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<NumericError>() {
            return 3;
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(_) | E::Parse { .. } | E::Version { .. } => 2,
                E::DegenerateNorm { .. } | E::Training { .. } | E::Calibration { .. } => 3,
                E::Layer { source, .. } => match **source {
                    E::Io(_) | E::Parse { .. } | E::Version { .. } => 2,
                    E::DegenerateNorm { .. } | E::Training { .. } | E::Calibration { .. } => 3,
                    _ => 1,
                },
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
