//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime
//! failure, 3 verification failed (`verify` only).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::agent::{run_training, Policy, RunArtifacts};
use crate::env::{LayoutRecord, SolutionRegistry};
use crate::error::{Error, Result};
use crate::harness::{
    epoch_metrics, final_placement_histogram, first_placement_histogram, mann_kendall, reward_chart_svg,
    seed_convergence_report, tail_mean_reward, ConvergenceReport, MannKendall, MetricRow,
};
use crate::io_cli::layout_io::{export_layout, read_layout_file, LayoutFormat};
use crate::io_cli::{
    create_run_dir, episodes_jsonl, histograms_csv, metrics_csv, read_episodes_jsonl, write_atomic, RunConfig,
};
use crate::lattice::DbLayout;
use crate::logic::{assemble_row_layout, Evaluator, RowVerdict, SolverConfig, SolverKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY_FAILED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "sidb-designer", version, about = "Reinforcement-learning designer for SiDB logic gates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Exhaustive,
    Anneal,
}

impl From<SolverArg> for SolverKind {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Exhaustive => SolverKind::Exhaustive,
            SolverArg::Anneal => SolverKind::Anneal,
        }
    }
}

#[derive(clap::Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Replace the configured seed list with this single seed.
    #[arg(long)]
    pub seed_override: Option<u64>,
    /// Root directory for run directories (overrides the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub solver: Option<SolverArg>,
    /// Seeds trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the agent and collect working layouts.
    Design(RunArgs),
    /// Run the uniformly random control policy.
    Baseline(RunArgs),
    /// Check a layout against the configured truth table.
    Verify {
        layout: PathBuf,
        config: PathBuf,
        #[arg(long, value_enum)]
        solver: Option<SolverArg>,
    },
    /// Ground states of a layout for every truth-table row.
    Simulate {
        layout: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        solver: Option<SolverArg>,
    },
    /// Convert a layout file or a solution registry to JSON or sqd.
    Export {
        input: PathBuf,
        #[arg(long, default_value = "json")]
        format: String,
        /// Output file, or directory when exporting a registry.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics, histograms and charts from run directories.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long)]
        control: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Outcome of a subcommand that completed without a runtime error.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    VerificationFailed,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Params(_)
        | Error::Geometry(_)
        | Error::Task(_)
        | Error::TruthTable(_)
        | Error::Adjacent(..)
        | Error::DuplicateSite(_)
        | Error::Format(_)
        | Error::Json(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::VerificationFailed) => EXIT_VERIFY_FAILED,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Design(args) => run_experiment(&args, Policy::Learn).map(|_| Outcome::Ok),
        Command::Baseline(args) => run_experiment(&args, Policy::Random).map(|_| Outcome::Ok),
        Command::Verify { layout, config, solver } => verify(&layout, &config, solver),
        Command::Simulate { layout, config, solver } => simulate(&layout, config.as_deref(), solver),
        Command::Export { input, format, out } => export(&input, &format, &out),
        Command::Report { runs, control, out } => report(&runs, control.as_deref(), out.as_deref()),
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed_override {
        cfg.experiment.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(s) = args.solver {
        cfg.solver.kind = s.into();
    }
    if args.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs every configured seed and writes the artifact tree. Returns the run
/// directory.
pub fn run_experiment(args: &RunArgs, policy: Policy) -> Result<PathBuf> {
    let cfg = load_config(args)?;
    let dir = create_run_dir(&cfg.output_dir, &cfg)?;
    write_atomic(&dir.join("config.json"), cfg.to_json().as_bytes())?;
    let seeds = cfg.experiment.seeds.clone();
    let results: Vec<Result<Vec<MetricRow>>> = if args.threads <= 1 || seeds.len() <= 1 {
        seeds.iter().map(|&s| run_seed(&cfg, s, &dir, policy)).collect()
    } else {
        let mut results: Vec<Option<Result<Vec<MetricRow>>>> = (0..seeds.len()).map(|_| None).collect();
        for chunk in seeds.iter().enumerate().collect::<Vec<_>>().chunks(args.threads) {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&(i, &s)| {
                        let (cfg, dir) = (&cfg, &dir);
                        (i, scope.spawn(move || run_seed(cfg, s, dir, policy)))
                    })
                    .collect();
                for (i, h) in handles {
                    results[i] = Some(h.join().unwrap_or_else(|_| Err(Error::Config("worker panicked".into()))));
                }
            });
        }
        results.into_iter().map(|r| r.expect("every seed ran")).collect()
    };
    let mut curves = Vec::new();
    for (s, r) in seeds.iter().zip(results) {
        curves.push((format!("seed {s}"), r?));
    }
    write_atomic(&dir.join("reward.svg"), reward_chart_svg(&curves, None).as_bytes())?;
    println!("{}", dir.display());
    Ok(dir)
}

fn seed_dir(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed-{seed}"))
}

fn run_seed(cfg: &RunConfig, seed: u64, dir: &Path, policy: Policy) -> Result<Vec<MetricRow>> {
    let cfg = cfg.with_seed(seed);
    let out = seed_dir(dir, seed);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let env = cfg.environment()?;
    let registry = SolutionRegistry::persistent(out.join("solutions.jsonl"))?;
    let ckpt = out.join("checkpoints");
    let artifacts = run_training(&env, &cfg.hyperparams, policy, &registry, Some(&ckpt))?;
    write_run_artifacts(&cfg, &out, &artifacts)?;
    Ok(artifacts.metrics)
}

#[derive(Serialize)]
struct Verification {
    digest: String,
    solver: SolverKind,
    working: bool,
    satisfied_rows: usize,
}

/// Metrics, episode logs, histograms and exhaustive re-verification of the
/// solutions of one run.
pub fn write_run_artifacts(cfg: &RunConfig, out: &Path, a: &RunArtifacts) -> Result<()> {
    let hp = &cfg.hyperparams;
    write_atomic(&out.join("metrics.csv"), &metrics_csv(&a.metrics)?)?;
    write_atomic(&out.join("episodes.jsonl"), &episodes_jsonl(&a.episodes)?)?;
    let task = cfg.gate_task()?;
    let mut hists = Vec::new();
    if let Ok(h) = first_placement_histogram(&a.episodes, 1, hp.episodes_per_epoch, &task.canvas) {
        hists.push(h);
    }
    if let Ok(h) = final_placement_histogram(&a.episodes, hp.episodes_per_epoch, &task.canvas) {
        if hists.first().map_or(true, |f| f.epoch != h.epoch) {
            hists.push(h);
        }
    }
    write_atomic(&out.join("histograms.csv"), &histograms_csv(&hists)?)?;
    let checker = Evaluator::new(
        cfg.geometry,
        cfg.physics,
        SolverConfig {
            kind: SolverKind::Exhaustive,
            seed: hp.seeds.annealer,
            ..cfg.solver
        },
    );
    let verified = a
        .solutions
        .iter()
        .map(|r| {
            let e = checker.evaluate(&task, &r.sites)?;
            Ok(Verification {
                digest: r.digest.to_string(),
                solver: checker.solver().kind,
                working: e.working,
                satisfied_rows: e.satisfied_rows,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_atomic(&out.join("verified.json"), &serde_json::to_vec_pretty(&verified)?)?;
    write_atomic(
        &out.join("reward.svg"),
        reward_chart_svg(&[("run".to_string(), a.metrics.clone())], None).as_bytes(),
    )?;
    Ok(())
}

fn evaluator_for(cfg: &RunConfig, solver: Option<SolverArg>, default: SolverKind) -> Evaluator {
    let kind = solver.map(SolverKind::from).unwrap_or(default);
    Evaluator::new(
        cfg.geometry,
        cfg.physics,
        SolverConfig {
            kind,
            seed: cfg.hyperparams.seeds.annealer,
            ..cfg.solver
        },
    )
}

fn verify(layout: &Path, config: &Path, solver: Option<SolverArg>) -> Result<Outcome> {
    let cfg = RunConfig::load(config)?;
    let record = read_layout_file(layout)?;
    let task = cfg.gate_task()?;
    let ev = evaluator_for(&cfg, solver, SolverKind::Exhaustive);
    let result = ev.evaluate(&task, &record.sites)?;
    for (row, verdict) in task.table.rows().iter().zip(&result.per_row) {
        match verdict {
            RowVerdict::Pass => println!("{row}  pass"),
            RowVerdict::Fail(reason) => println!("{row}  fail ({reason})"),
        }
    }
    println!(
        "{} of {} units satisfied; {}",
        result.satisfied_rows,
        task.unit_count(),
        if result.working { "working" } else { "not working" }
    );
    Ok(if result.working {
        Outcome::Ok
    } else {
        Outcome::VerificationFailed
    })
}

fn simulate(layout: &Path, config: Option<&Path>, solver: Option<SolverArg>) -> Result<Outcome> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let record = read_layout_file(layout)?;
    let task = cfg.gate_task()?;
    let ev = evaluator_for(&cfg, solver, SolverKind::Exhaustive);
    for (r, row) in task.table.rows().iter().enumerate() {
        let assembled = assemble_row_layout(&task, &record.sites, r, &cfg.geometry)?;
        let gs = ev.ground_state(&assembled);
        let mut line = format!("{row}  sites={}", assembled.len());
        if gs.converged {
            let _ = write!(line, "  energy={:.6} eV  states={}", gs.energy, gs.configs.len());
            for c in &gs.configs {
                let charges: Vec<String> = c.values().iter().map(|v| format!("{v:+}")).collect();
                let _ = write!(line, "\n    [{}]", charges.join(" "));
            }
        } else {
            line.push_str("  unconverged");
        }
        println!("{line}");
    }
    Ok(Outcome::Ok)
}

fn export(input: &Path, format: &str, out: &Path) -> Result<Outcome> {
    let format: LayoutFormat = format.parse()?;
    let ext = match format {
        LayoutFormat::Json => "json",
        LayoutFormat::Sqd => "sqd",
    };
    if input.extension().and_then(|e| e.to_str()) == Some("jsonl") {
        let registry = SolutionRegistry::load(input)?;
        for r in registry.records() {
            write_atomic(&out.join(format!("{}.{ext}", r.digest)), &export_layout(&r, format)?)?;
        }
    } else {
        let record = read_layout_file(input)?;
        write_atomic(out, &export_layout(&record, format)?)?;
    }
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct RunReport {
    run: String,
    epochs: usize,
    final5_mean_reward: f64,
    solutions_total: usize,
    trend: MannKendall,
    first_modal_site: Option<usize>,
    final_modal_site: Option<usize>,
}

#[derive(Serialize)]
struct Report {
    runs: Vec<RunReport>,
    control_final5_mean_reward: Option<f64>,
    convergence: Option<ConvergenceReport>,
}

/// Seed directories under a run directory, or the directory itself.
fn run_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.join("episodes.jsonl").exists() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("episodes.jsonl").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Config(format!("{} contains no runs", path.display())));
    }
    Ok(dirs)
}

fn config_near(dir: &Path) -> Result<RunConfig> {
    for d in dir.ancestors().take(2) {
        let p = d.join("config.json");
        if p.exists() {
            return RunConfig::load(&p);
        }
    }
    Err(Error::Config(format!("no config.json at or above {}", dir.display())))
}

fn report(runs: &[PathBuf], control: Option<&Path>, out: Option<&Path>) -> Result<Outcome> {
    if runs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut reports = Vec::new();
    let mut curves = Vec::new();
    let mut finals = Vec::new();
    let mut canvas = None;
    for root in runs {
        for dir in run_dirs(root)? {
            let cfg = config_near(&dir)?;
            let task = cfg.gate_task()?;
            let per_epoch = cfg.hyperparams.episodes_per_epoch;
            let logs = read_episodes_jsonl(&dir.join("episodes.jsonl"))?;
            let rows = epoch_metrics(&logs, per_epoch);
            let first = first_placement_histogram(&logs, 1, per_epoch, &task.canvas).ok();
            let last = final_placement_histogram(&logs, per_epoch, &task.canvas).ok();
            let means: Vec<f64> = rows.iter().map(|r| r.mean_reward).collect();
            reports.push(RunReport {
                run: dir.display().to_string(),
                epochs: rows.len(),
                final5_mean_reward: tail_mean_reward(&rows, 5),
                solutions_total: rows.last().map_or(0, |r| r.solutions_total),
                trend: mann_kendall(&means),
                first_modal_site: first.as_ref().map(|h| h.modal_site()),
                final_modal_site: last.as_ref().map(|h| h.modal_site()),
            });
            if let Some(h) = last {
                finals.push(h);
            }
            canvas.get_or_insert(task.canvas);
            curves.push((dir.file_name().unwrap_or_default().to_string_lossy().into_owned(), rows));
        }
    }
    let control_rows = match control {
        Some(c) => {
            let mut all = Vec::new();
            for dir in run_dirs(c)? {
                let cfg = config_near(&dir)?;
                let logs = read_episodes_jsonl(&dir.join("episodes.jsonl"))?;
                all.push(epoch_metrics(&logs, cfg.hyperparams.episodes_per_epoch));
            }
            all.into_iter().next()
        }
        None => None,
    };
    let convergence = match (finals.len() >= 2, canvas) {
        (true, Some(c)) => Some(seed_convergence_report(&finals, &c)?),
        _ => None,
    };
    let report = Report {
        runs: reports,
        control_final5_mean_reward: control_rows.as_ref().map(|r| tail_mean_reward(r, 5)),
        convergence,
    };
    let out_dir = out.unwrap_or(&runs[0]);
    write_atomic(&out_dir.join("report.json"), &serde_json::to_vec_pretty(&report)?)?;
    write_atomic(
        &out_dir.join("report.svg"),
        reward_chart_svg(&curves, control_rows.as_deref()).as_bytes(),
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(Outcome::Ok)
}

/// Writes a layout record, mainly for tests and scripting.
pub fn write_layout(path: &Path, sites: DbLayout, format: LayoutFormat) -> Result<()> {
    let record = LayoutRecord::new(sites, Default::default(), Vec::new());
    write_atomic(path, &export_layout(&record, format)?)
}
