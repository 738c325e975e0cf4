//! Run configuration, persistence formats and the command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod layout_io;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{EpisodeLog, Hyperparams, Seeds};
use crate::env::{Environment, RewardParams};
use crate::error::{Error, Result};
use crate::harness::{MetricRow, PlacementHistogram};
use crate::lattice::{DbLayout, LatticeGeometry};
use crate::logic::{Canvas, Evaluator, GateTask, InputPort, OutputPort, RowCounting, SolverConfig, TruthTable};
use crate::physics::PhysParams;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Truth table given by preset name or explicit rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TableSpec {
    Preset(String),
    Rows(TruthTable),
}

impl TableSpec {
    pub fn resolve(&self) -> Result<TruthTable> {
        match self {
            TableSpec::Preset(name) => TruthTable::preset(name),
            TableSpec::Rows(t) => Ok(t.clone()),
        }
    }
}

/// A task built from a named template with optional field overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<TableSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaffold: Option<DbLayout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<InputPort>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<Vec<OutputPort>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canvas: Option<Canvas>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_placements: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counting: Option<RowCounting>,
}

fn default_template() -> String {
    "or".to_string()
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            template: default_template(),
            table: None,
            scaffold: None,
            inputs: None,
            outputs: None,
            canvas: None,
            max_placements: None,
            counting: None,
        }
    }
}

impl TaskSpec {
    pub fn resolve(&self) -> Result<GateTask> {
        let mut task = GateTask::template(&self.template)?;
        if let Some(t) = &self.table {
            task.table = t.resolve()?;
        }
        if let Some(s) = &self.scaffold {
            task.scaffold = s.clone();
        }
        if let Some(i) = &self.inputs {
            task.inputs = i.clone();
        }
        if let Some(o) = &self.outputs {
            task.outputs = o.clone();
        }
        if let Some(c) = self.canvas {
            task.canvas = c;
        }
        if let Some(m) = self.max_placements {
            task.max_placements = m;
        }
        if let Some(c) = self.counting {
            task.counting = c;
        }
        Ok(task)
    }
}

/// Seeds for multi-seed experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    /// Base seeds; each expands to per-component seeds.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self { seeds: vec![0] }
    }
}

/// Complete description of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub geometry: LatticeGeometry,
    #[serde(default)]
    pub physics: PhysParams,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    #[serde(default)]
    pub rewards: RewardParams,
    #[serde(default)]
    pub experiment: ExperimentSpec,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            task: TaskSpec::default(),
            geometry: LatticeGeometry::default(),
            physics: PhysParams::default(),
            solver: SolverConfig::default(),
            hyperparams: Hyperparams::default(),
            rewards: RewardParams::default(),
            experiment: ExperimentSpec::default(),
            output_dir: default_output_dir(),
        }
    }
}

impl RunConfig {
    /// Strict parse: unknown keys are rejected, omitted fields defaulted and
    /// the result validated.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.geometry.validate()?;
        self.physics.validate()?;
        self.rewards.validate()?;
        self.hyperparams.validate()?;
        let task = self.task.resolve()?;
        task.validate(&self.geometry)?;
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds must not be empty".into()));
        }
        let mut seen = self.experiment.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.experiment.seeds.len() {
            return Err(Error::Config("experiment.seeds must be distinct".into()));
        }
        Ok(())
    }

    pub fn gate_task(&self) -> Result<GateTask> {
        self.task.resolve()
    }

    /// Copy with every seed derived from `base`.
    pub fn with_seed(&self, base: u64) -> Self {
        let mut cfg = self.clone();
        cfg.hyperparams.seeds = Seeds::from_base(base);
        cfg.experiment.seeds = vec![base];
        cfg
    }

    /// Environment for this config. The annealer seed comes from the
    /// hyperparameter seeds.
    pub fn environment(&self) -> Result<Environment> {
        let solver = SolverConfig {
            seed: self.hyperparams.seeds.annealer,
            ..self.solver
        };
        let evaluator = Evaluator::new(self.geometry, self.physics, solver);
        Environment::new(self.gate_task()?, evaluator, self.rewards)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config is serializable");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn metrics_csv(rows: &[MetricRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Histograms flattened row-major: `epoch,episodes,height,width,c0,c1,...`.
pub fn histograms_csv(hists: &[PlacementHistogram]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    for h in hists {
        let mut rec = vec![
            h.epoch.to_string(),
            h.episodes.to_string(),
            h.height.to_string(),
            h.width.to_string(),
        ];
        rec.extend(h.counts.iter().map(u64::to_string));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn episodes_jsonl(logs: &[EpisodeLog]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for l in logs {
        serde_json::to_writer(&mut out, l)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_episodes_jsonl(path: &Path) -> Result<Vec<EpisodeLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// `YYYYMMDDTHHMMSSZ` for a UNIX time in seconds.
pub fn utc_timestamp(secs: u64) -> String {
    let days = (secs / 86_400) as i64;
    let rem = secs % 86_400;
    // civil-from-days
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = yoe + era * 400 + (m <= 2) as i64;
    format!(
        "{y:04}{m:02}{d:02}T{:02}{:02}{:02}Z",
        rem / 3600,
        (rem / 60) % 60,
        rem % 60
    )
}

/// Creates `<root>/<config digest>-<timestamp>`, adding a suffix on collision.
pub fn create_run_dir(root: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let base = format!("{}-{}", cfg.digest(), utc_timestamp(secs));
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}
