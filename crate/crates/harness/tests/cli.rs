use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rimc_harness::results::{read_rows, Format, ResultRow};

const CONFIG: &str = r#"
version = 1
[model]
preset = "mlp"
[dataset]
kind = "blobs"
classes = 3
shape = [8]
latent_dim = 4
separation = 3.0
ambient_noise = 0.1
n_train = 90
n_test = 60
seed = 3
[teacher]
epochs = 5
batch = 16
lr = 0.02
[drift]
rhos = [0.2]
seeds = [0]
[calibration]
methods = ["dora"]
ranks = [2]
n_samples = [4]
[calibration.settings]
epochs = 3
[backprop]
epochs = 3
"#;

fn rimc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rimc")).args(args).output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let text = CONFIG.to_owned() + extra;
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_teacher_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = ok(&rimc(&["train-teacher", "--config", s(&cfg), "--out", s(&a)]));
    assert!(out.contains("teacher test accuracy"));
    ok(&rimc(&["train-teacher", "--config", s(&cfg), "--out", s(&b)]));
    let ta = std::fs::read(a.join("teacher.rimc")).unwrap();
    assert_eq!(ta, std::fs::read(b.join("teacher.rimc")).unwrap());
}

#[test]
fn usage_and_io_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, CONFIG.replace("\"mlp\"", "\"transformer\"")).unwrap();
    assert_eq!(rimc(&["train-teacher", "--config", s(&bad)]).status.code(), Some(1));
    assert_eq!(rimc(&["train-teacher"]).status.code(), Some(1));
    assert_eq!(rimc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(rimc(&["--help"]).status.code(), Some(0));

    let idx = dir.path().join("idx.toml");
    let body = CONFIG.split("[dataset]").next().unwrap().to_owned()
        + "[dataset]\nkind = \"idx\"\ntrain_images = \"/nonexistent/a\"\ntrain_labels = \"/nonexistent/b\"\n\
           test_images = \"/nonexistent/c\"\ntest_labels = \"/nonexistent/d\"\nclasses = 10\n";
    std::fs::write(&idx, body).unwrap();
    let out = rimc(&["train-teacher", "--config", s(&idx), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = rimc(&["eval", "--config", s(&write_config(dir.path(), "")), "--model", "/nonexistent.rimc"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn deploy_then_calibrate_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let text = CONFIG.replace(r#"methods = ["dora"]"#, r#"methods = ["dora", "lora", "backprop"]"#);
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("run");
    ok(&rimc(&["train-teacher", "--config", s(&cfg), "--out", s(&out)]));
    let dep = ok(&rimc(&["deploy", "--config", s(&cfg), "--out", s(&out)]));
    assert!(dep.contains("drifted accuracy"));
    let student = out.join("student.rimc");
    ok(&rimc(&["calibrate", "--config", s(&cfg), "--out", s(&out), "--student", s(&student)]));

    let rows = read_rows(&out.join("calibration.csv"), Format::Csv).unwrap();
    let methods: Vec<String> = rows.iter().map(|r| format!("{:?}", r.method)).collect();
    assert_eq!(methods, ["Dora", "Lora", "Backprop"]);
    assert_eq!(rows[0].rram_writes, 0);
    assert_eq!(rows[1].rram_writes, 0);
    // 8·h1 + h1·h2 + h2·3 weights for the preset hidden sizes.
    let cells = (8 * 128 + 128 * 64 + 64 * 3) as u64;
    assert_eq!(rows[2].rram_writes, 3 * 4 * cells);
    assert!(out.join("reports/dora-r2-n4-s0.json").exists());

    // The stored calibrated model reproduces the reported accuracy.
    let model = out.join("reports/dora-r2-n4-s0.rimc");
    let acc: f64 = ok(&rimc(&["eval", "--config", s(&cfg), "--model", s(&model)])).trim().parse().unwrap();
    assert!((acc - rows[0].acc_calibrated).abs() < 1e-9);
}

fn median_oracle(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    }
}

#[test]
fn sweep_counts_resumes_and_summarizes() {
    let dir = tempfile::tempdir().unwrap();
    let text = CONFIG
        .replace("ranks = [2]", "ranks = [1, 2]")
        .replace("rhos = [0.2]", "rhos = [0.1, 0.3]")
        .replace("seeds = [0]", "seeds = [0, 1]");
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, text).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = ok(&rimc(&["sweep", "--config", s(&cfg), "--out", s(&a), "--workers", "2"]));
    assert!(first.contains("8 cells: 8 completed, 0 skipped, 0 failed"), "{first}");
    let rows = read_rows(&a.join("results.csv"), Format::Csv).unwrap();
    assert_eq!(rows.len(), 8);
    let keys: std::collections::HashSet<_> = rows.iter().map(ResultRow::key).collect();
    assert_eq!(keys.len(), 8);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.acc_calibrated) && r.rram_writes == 0));

    let again = ok(&rimc(&["sweep", "--config", s(&cfg), "--out", s(&a)]));
    assert!(again.contains("0 completed, 8 skipped"), "{again}");
    assert_eq!(read_rows(&a.join("results.csv"), Format::Csv).unwrap(), rows);

    // Same config, different worker count, fresh directory: identical bytes.
    ok(&rimc(&["sweep", "--config", s(&cfg), "--out", s(&b), "--workers", "1"]));
    for f in ["results.csv", "summary.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(std::fs::read_to_string(a.join("timing.csv")).unwrap().contains("wall_ms"));

    #[derive(serde::Deserialize)]
    struct Summary {
        rank: usize,
        rho: f64,
        seeds: usize,
        acc_calibrated: f64,
        acc_drifted: f64,
    }
    let summary: Vec<Summary> =
        csv::Reader::from_path(a.join("summary.csv")).unwrap().deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(summary.len(), 4);
    for srow in &summary {
        let group: Vec<&ResultRow> = rows.iter().filter(|r| r.rank == srow.rank && r.rho == srow.rho).collect();
        assert_eq!(srow.seeds, group.len());
        assert_eq!(srow.acc_calibrated, median_oracle(group.iter().map(|r| r.acc_calibrated).collect()));
        assert_eq!(srow.acc_drifted, median_oracle(group.iter().map(|r| r.acc_drifted).collect()));
    }
}

#[test]
fn sweep_seed_flag_and_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("j");
    ok(&rimc(&["sweep", "--config", s(&cfg), "--out", s(&out), "--seed", "9", "--format", "jsonl"]));
    let rows = read_rows(&out.join("results.jsonl"), Format::Jsonl).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].seed, 9);
}

#[test]
fn cost_table_defaults() {
    let text = ok(&rimc(&["cost"]));
    for needle in ["2400", "200", "41666", "1250"] {
        assert!(text.contains(needle), "{needle} missing from\n{text}");
    }
    let csv_text = ok(&rimc(&["cost", "--format", "csv"]));
    assert_eq!(csv_text.lines().count(), 3);
}
