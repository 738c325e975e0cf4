mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::tiny_config;
use sidb_designer::env::SolutionRegistry;
use sidb_designer::io_cli::cli::{EXIT_OK, EXIT_USAGE, EXIT_VERIFY_FAILED};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sidb-designer"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_config(dir: &Path, steps: u64) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, tiny_config(steps).to_json()).unwrap();
    path
}

fn design(config: &Path, out: &Path, seed: u64) -> PathBuf {
    let o = run(&[
        "design",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed-override",
        &seed.to_string(),
    ]);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    PathBuf::from(stdout.lines().last().unwrap().trim())
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&run(&[])), EXIT_USAGE);
    assert_eq!(code(&run(&["frobnicate"])), EXIT_USAGE);
    assert_eq!(code(&run(&["--help"])), EXIT_OK);
    assert_eq!(code(&run(&["design", "--config", "/nonexistent/config.json"])), EXIT_USAGE);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version": 1, "learning_rate": 0.1}"#).unwrap();
    let o = run(&["design", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), EXIT_USAGE);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let cfg = write_config(dir.path(), 100);
    let o = run(&["design", "--config", cfg.to_str().unwrap(), "--threads", "0"]);
    assert_eq!(code(&o), EXIT_USAGE);
}

#[test]
fn design_is_reproducible_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 300);
    let a = design(&cfg, &dir.path().join("a"), 5);
    let b = design(&cfg, &dir.path().join("b"), 5);
    for name in ["metrics.csv", "solutions.jsonl", "episodes.jsonl", "histograms.csv"] {
        let fa = std::fs::read(a.join("seed-5").join(name)).unwrap();
        let fb = std::fs::read(b.join("seed-5").join(name)).unwrap();
        assert_eq!(fa, fb, "{name} differs");
    }
    for name in ["config.json", "reward.svg"] {
        assert!(a.join(name).exists(), "{name} missing");
    }
    assert!(a.join("seed-5/checkpoints/final.ckpt").exists());
    assert!(a.join("seed-5/verified.json").exists());

    let c = design(&cfg, &dir.path().join("c"), 6);
    let fa = std::fs::read(a.join("seed-5/episodes.jsonl")).unwrap();
    let fc = std::fs::read(c.join("seed-6/episodes.jsonl")).unwrap();
    assert_ne!(fa, fc);
}

#[test]
fn verify_export_simulate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 400);
    let run_dir = design(&cfg, &dir.path().join("runs"), 1);
    let registry_path = run_dir.join("seed-1/solutions.jsonl");
    let registry = SolutionRegistry::load(&registry_path).unwrap();
    assert!(!registry.is_empty(), "tiny run found no solution");

    let out = dir.path().join("export");
    for format in ["json", "sqd"] {
        let o = run(&[
            "export",
            registry_path.to_str().unwrap(),
            "--format",
            format,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), EXIT_OK);
    }
    let record = &registry.records()[0];
    for ext in ["json", "sqd"] {
        let file = out.join(format!("{}.{ext}", record.digest));
        let o = run(&["verify", file.to_str().unwrap(), cfg.to_str().unwrap()]);
        assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stdout));
        let o = run(&["simulate", file.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&o), EXIT_OK);
        assert_eq!(String::from_utf8_lossy(&o.stdout).lines().filter(|l| l.contains("->")).count(), 4);
    }

    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "[]").unwrap();
    let o = run(&["verify", empty.to_str().unwrap(), cfg.to_str().unwrap()]);
    assert_eq!(code(&o), EXIT_VERIFY_FAILED);

    let o = run(&["report", run_dir.to_str().unwrap()]);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run_dir.join("report.json").exists());
    assert!(run_dir.join("report.svg").exists());
}

#[test]
fn baseline_runs_without_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 120);
    let o = run(&[
        "baseline",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("ctl").to_str().unwrap(),
        "--solver",
        "exhaustive",
    ]);
    assert_eq!(code(&o), EXIT_OK);
    let run_dir = PathBuf::from(String::from_utf8(o.stdout).unwrap().lines().last().unwrap());
    let seed_dir = run_dir.join("seed-0");
    assert!(seed_dir.join("metrics.csv").exists());
    assert!(!seed_dir.join("checkpoints").exists());
}
