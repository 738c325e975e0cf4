//! The placement environment: state, action masking, rewards, termination
//! and the registry of discovered working layouts.

use std::collections::HashSet;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lattice::{DbLayout, LatticeSite};
use crate::logic::{EvalResult, Evaluator, GateTask};

/// Reward constants. Row terms are divided by the number of counting units
/// and the step cost by the placement budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardParams {
    pub row_gain: f64,
    pub row_loss: f64,
    pub step_cost: f64,
    pub win: f64,
    pub clamp_min: f64,
    pub clamp_max: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            row_gain: 0.4,
            row_loss: -0.4,
            step_cost: -0.75,
            win: 1.0,
            clamp_min: -1.0,
            clamp_max: 1.0,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.row_gain,
            self.row_loss,
            self.step_cost,
            self.win,
            self.clamp_min,
            self.clamp_max,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("reward parameters must be finite".into()));
        }
        if self.clamp_min > self.clamp_max {
            return Err(Error::Config("reward clamp bounds are reversed".into()));
        }
        Ok(())
    }

    /// Clamped reward of one placement that gained and lost the given
    /// numbers of counting units.
    pub fn step_reward(&self, gained: usize, lost: usize, units: usize, max_placements: usize, new_solution: bool) -> f64 {
        let units = units as f64;
        let mut reward = gained as f64 * self.row_gain / units
            + lost as f64 * self.row_loss / units
            + self.step_cost / max_placements as f64;
        if new_solution {
            reward += self.win;
        }
        reward.clamp(self.clamp_min, self.clamp_max)
    }
}

/// SHA-256 identity of a placement set, independent of insertion order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LayoutDigest([u8; 32]);

impl LayoutDigest {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Display for LayoutDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for LayoutDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LayoutDigest({self})")
    }
}

impl TryFrom<String> for LayoutDigest {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        let bytes = hex::decode(&s).map_err(|e| format!("bad digest {s:?}: {e}"))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| format!("digest {s:?} is not 32 bytes"))?;
        Ok(Self(arr))
    }
}

impl From<LayoutDigest> for String {
    fn from(d: LayoutDigest) -> Self {
        d.to_string()
    }
}

/// Digest over the canonically ordered site list.
///
/// The hash input is the ASCII prefix `sidb-layout/1` followed by one
/// `col,row,sub;` record per site. The empty layout therefore hashes the
/// prefix alone.
pub fn canonical_digest(placed: &DbLayout) -> LayoutDigest {
    let mut h = Sha256::new();
    h.update(b"sidb-layout/1");
    for s in placed.sites() {
        h.update(format!("{},{},{};", s.col, s.row, s.sub).as_bytes());
    }
    LayoutDigest(h.finalize().into())
}

/// Where and when a layout was found.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Provenance {
    pub episode: u64,
    pub step: u64,
    pub seed: u64,
}

/// A persisted layout with its identity and per-row ground-state energies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutRecord {
    pub digest: LayoutDigest,
    pub sites: DbLayout,
    #[serde(default)]
    pub provenance: Provenance,
    #[serde(default)]
    pub energies: Vec<Option<f64>>,
}

impl LayoutRecord {
    pub fn new(sites: DbLayout, provenance: Provenance, energies: Vec<Option<f64>>) -> Self {
        Self {
            digest: canonical_digest(&sites),
            sites,
            provenance,
            energies,
        }
    }

    /// Checks that the stored digest matches the site list.
    pub fn verify_digest(&self) -> Result<()> {
        let actual = canonical_digest(&self.sites);
        if actual != self.digest {
            return Err(Error::Format(format!(
                "digest {} does not match sites (expected {actual})",
                self.digest
            )));
        }
        Ok(())
    }
}

#[derive(Default)]
struct RegistryInner {
    hashes: HashSet<LayoutDigest>,
    records: Vec<LayoutRecord>,
    sink: Option<(PathBuf, File)>,
}

/// Set of discovered working layouts, optionally mirrored to an append-only
/// JSON-lines file. Novelty check and insertion happen under one lock.
#[derive(Default)]
pub struct SolutionRegistry {
    inner: Mutex<RegistryInner>,
}

impl SolutionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry that appends every new record to `path`, creating the file.
    /// Existing records in the file are loaded first.
    pub fn persistent(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let registry = if path.exists() {
            Self::load(&path)?
        } else {
            Self::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        registry.inner.lock().unwrap().sink = Some((path, file));
        Ok(registry)
    }

    /// Reads a JSON-lines registry file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let registry = Self::new();
        {
            let mut inner = registry.inner.lock().unwrap();
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: LayoutRecord = serde_json::from_str(&line).map_err(|e| {
                    Error::Format(format!("{}:{}: {e}", path.display(), n + 1))
                })?;
                record.verify_digest()?;
                if inner.hashes.insert(record.digest) {
                    inner.records.push(record);
                }
            }
        }
        Ok(registry)
    }

    pub fn contains(&self, digest: &LayoutDigest) -> bool {
        self.inner.lock().unwrap().hashes.contains(digest)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<LayoutRecord> {
        self.inner.lock().unwrap().records.clone()
    }

    /// Inserts the record unless its digest is known. Returns whether it was new.
    pub fn insert_if_new(&self, record: LayoutRecord) -> Result<bool> {
        let mut inner = self.inner.lock().unwrap();
        if !inner.hashes.insert(record.digest) {
            return Ok(false);
        }
        if let Some((path, file)) = inner.sink.as_mut() {
            let mut line = serde_json::to_string(&record)?;
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| Error::io(path.clone(), e))?;
        }
        inner.records.push(record);
        Ok(true)
    }
}

/// Network input: channels x height x width, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Observation {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }
}

/// Environment state after `t` placements.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub placed: DbLayout,
    /// Canvas indices in placement order.
    pub actions: Vec<usize>,
    pub t: usize,
    pub satisfied: usize,
    pub unit_pass: Vec<bool>,
    pub mask: Vec<bool>,
}

impl EnvState {
    pub fn has_valid_action(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }
}

/// Diagnostics attached to each transition.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub satisfied: usize,
    pub gained: usize,
    pub lost: usize,
    pub working: bool,
    pub new_solution: Option<LayoutDigest>,
    pub unconverged_rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub terminal: bool,
    pub info: StepInfo,
}

/// Single-task environment. Cloning shares the evaluator cache.
#[derive(Clone)]
pub struct Environment {
    task: Arc<GateTask>,
    evaluator: Evaluator,
    rewards: RewardParams,
    /// Canvas sites that coincide with or touch a fixed site.
    blocked: Vec<bool>,
    /// Canvas indices adjacent to each canvas index.
    neighbours: Vec<Vec<usize>>,
    fixed_frame: Vec<(usize, usize)>,
}

impl Environment {
    pub fn new(task: GateTask, evaluator: Evaluator, rewards: RewardParams) -> Result<Self> {
        let geom = *evaluator.geometry();
        task.validate(&geom)?;
        rewards.validate()?;
        let canvas = task.canvas;
        let fixed = task.fixed_sites();
        let sites: Vec<LatticeSite> = canvas.sites().collect();
        let blocked = sites
            .iter()
            .map(|&s| fixed.contains(s) || fixed.sites().iter().any(|&f| geom.is_adjacent(f, s)))
            .collect();
        let neighbours = sites
            .iter()
            .map(|&a| {
                sites
                    .iter()
                    .enumerate()
                    .filter(|&(_, &b)| a != b && geom.is_adjacent(a, b))
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        let (h, w) = (canvas.height as i64, canvas.width as i64);
        let fixed_frame = fixed
            .sites()
            .iter()
            .map(|&s| {
                let (y, x) = canvas.raster(s);
                ((y.clamp(-1, h) + 1) as usize, (x.clamp(-1, w) + 1) as usize)
            })
            .collect();
        Ok(Self {
            task: Arc::new(task),
            evaluator,
            rewards,
            blocked,
            neighbours,
            fixed_frame,
        })
    }

    pub fn task(&self) -> &GateTask {
        &self.task
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.evaluator
    }

    pub fn rewards(&self) -> &RewardParams {
        &self.rewards
    }

    pub fn n_actions(&self) -> usize {
        self.task.canvas.len()
    }

    /// Observation shape `(channels, height, width)` including the frame.
    pub fn observation_shape(&self) -> (usize, usize, usize) {
        (3, self.task.canvas.height + 2, self.task.canvas.width + 2)
    }

    pub fn reset(&self) -> Result<EnvState> {
        let placed = DbLayout::empty();
        let eval = self.evaluator.evaluate(&self.task, &placed)?;
        Ok(EnvState {
            placed,
            actions: Vec::new(),
            t: 0,
            satisfied: eval.satisfied_rows,
            unit_pass: eval.unit_pass,
            mask: self.blocked.iter().map(|&b| !b).collect(),
        })
    }

    pub fn valid_action_mask(&self, state: &EnvState) -> Vec<bool> {
        state.mask.clone()
    }

    /// Places a dangling bond at canvas index `action`.
    pub fn step(
        &self,
        state: &EnvState,
        action: usize,
        registry: &SolutionRegistry,
        provenance: Provenance,
    ) -> Result<(EnvState, StepOutcome)> {
        let m = self.task.max_placements;
        if state.t >= m {
            return Err(Error::InvalidAction(action, "placement budget exhausted".into()));
        }
        if !state.mask.get(action).copied().unwrap_or(false) {
            return Err(Error::InvalidAction(action, "masked out".into()));
        }
        let site = self.task.canvas.site_at(action);
        let mut placed = state.placed.clone();
        placed.insert(site);
        let eval = self.evaluator.evaluate(&self.task, &placed)?;

        let mut mask = state.mask.clone();
        mask[action] = false;
        for &j in &self.neighbours[action] {
            mask[j] = false;
        }
        let mut actions = state.actions.clone();
        actions.push(action);
        let next = EnvState {
            placed,
            actions,
            t: state.t + 1,
            satisfied: eval.satisfied_rows,
            unit_pass: eval.unit_pass.clone(),
            mask,
        };
        let outcome = self.score(state, &next, &eval, registry, provenance)?;
        Ok((next, outcome))
    }

    fn score(
        &self,
        prev: &EnvState,
        next: &EnvState,
        eval: &EvalResult,
        registry: &SolutionRegistry,
        provenance: Provenance,
    ) -> Result<StepOutcome> {
        let gained = prev
            .unit_pass
            .iter()
            .zip(&next.unit_pass)
            .filter(|&(&a, &b)| !a && b)
            .count();
        let lost = prev
            .unit_pass
            .iter()
            .zip(&next.unit_pass)
            .filter(|&(&a, &b)| a && !b)
            .count();
        let mut new_solution = None;
        if eval.working {
            let record = LayoutRecord::new(next.placed.clone(), provenance, eval.energies.clone());
            let digest = record.digest;
            if registry.insert_if_new(record)? {
                new_solution = Some(digest);
            }
        }
        let reward = self.rewards.step_reward(
            gained,
            lost,
            self.task.unit_count(),
            self.task.max_placements,
            new_solution.is_some(),
        );
        let terminal = new_solution.is_some()
            || next.t >= self.task.max_placements
            || !next.has_valid_action();
        let unconverged_rows = eval
            .per_row
            .iter()
            .filter(|v| {
                matches!(v, crate::logic::RowVerdict::Fail(crate::logic::FailReason::Unconverged))
            })
            .count();
        Ok(StepOutcome {
            reward,
            terminal,
            info: StepInfo {
                satisfied: next.satisfied,
                gained,
                lost,
                working: eval.working,
                new_solution,
                unconverged_rows,
            },
        })
    }

    /// Encodes the state as three channels on the canvas extended by a
    /// one-site frame: fixed sites (clamped onto the frame), placements and
    /// the valid-action mask.
    pub fn encode_state(&self, state: &EnvState) -> Observation {
        let (c, h, w) = self.observation_shape();
        let mut obs = Observation::zeros(c, h, w);
        for &(y, x) in &self.fixed_frame {
            obs.set(0, y, x, 1.0);
        }
        let cw = self.task.canvas.width;
        for &a in &state.actions {
            obs.set(1, a / cw + 1, a % cw + 1, 1.0);
        }
        for (a, _) in state.mask.iter().enumerate().filter(|(_, &m)| m) {
            obs.set(2, a / cw + 1, a % cw + 1, 1.0);
        }
        obs
    }
}
