//! Binary-dot logic: truth tables, gate tasks, row assembly and
//! truth-table verification against simulated ground states.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{DbLayout, LatticeGeometry, LatticeSite};
use crate::physics::{
    anneal_ground_state, exhaustive_ground_states, AnnealSchedule, ChargeConfig, ChargeModel,
    ChargeState, GroundStateResult, PhysParams, DEFAULT_EXHAUSTIVE_LIMIT,
};

/// One input combination and its expected outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TruthRow {
    pub inputs: Vec<bool>,
    pub outputs: Vec<bool>,
}

impl fmt::Display for TruthRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.inputs {
            write!(f, "{}", b as u8)?;
        }
        write!(f, "->")?;
        for &b in &self.outputs {
            write!(f, "{}", b as u8)?;
        }
        Ok(())
    }
}

/// A complete truth table. Serialized as rows like `"01->1"`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TruthTable {
    n_inputs: usize,
    n_outputs: usize,
    rows: Vec<TruthRow>,
}

fn parse_bits(text: &str) -> Result<Vec<bool>> {
    text.trim()
        .chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(Error::TruthTable(format!("unexpected character {other:?}"))),
        })
        .collect()
}

impl TruthTable {
    pub fn new(rows: Vec<TruthRow>) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::TruthTable("no rows".into()))?;
        let (n_inputs, n_outputs) = (first.inputs.len(), first.outputs.len());
        if n_inputs == 0 || n_outputs == 0 {
            return Err(Error::TruthTable("need at least one input and one output".into()));
        }
        if n_inputs > 16 {
            return Err(Error::TruthTable("at most 16 inputs are supported".into()));
        }
        if rows.len() != 1 << n_inputs {
            return Err(Error::TruthTable(format!(
                "{} inputs need {} rows, got {}",
                n_inputs,
                1 << n_inputs,
                rows.len()
            )));
        }
        let mut seen = vec![false; rows.len()];
        for row in &rows {
            if row.inputs.len() != n_inputs || row.outputs.len() != n_outputs {
                return Err(Error::TruthTable(format!("row {row} has the wrong width")));
            }
            let code = row
                .inputs
                .iter()
                .fold(0usize, |acc, &b| (acc << 1) | b as usize);
            if std::mem::replace(&mut seen[code], true) {
                return Err(Error::TruthTable(format!("duplicate input pattern in row {row}")));
            }
        }
        Ok(Self {
            n_inputs,
            n_outputs,
            rows,
        })
    }

    /// Parses rows of the form `"01->1"` (also accepts `→` or `:` as separator).
    pub fn parse<S: AsRef<str>>(rows: &[S]) -> Result<Self> {
        let parsed = rows
            .iter()
            .map(|r| {
                let r = r.as_ref();
                let (lhs, rhs) = r
                    .split_once("->")
                    .or_else(|| r.split_once('→'))
                    .or_else(|| r.split_once(':'))
                    .ok_or_else(|| Error::TruthTable(format!("row {r:?} lacks a separator")))?;
                Ok(TruthRow {
                    inputs: parse_bits(lhs)?,
                    outputs: parse_bits(rhs)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(parsed)
    }

    /// Two-input gate presets and the half adder (outputs: sum, carry).
    pub fn preset(name: &str) -> Result<Self> {
        let f: fn(bool, bool) -> Vec<bool> = match name.to_ascii_lowercase().as_str() {
            "or" => |a, b| vec![a | b],
            "and" => |a, b| vec![a & b],
            "nand" => |a, b| vec![!(a & b)],
            "nor" => |a, b| vec![!(a | b)],
            "xor" => |a, b| vec![a ^ b],
            "xnor" => |a, b| vec![!(a ^ b)],
            "half_adder" | "half-adder" | "ha" => |a, b| vec![a ^ b, a & b],
            other => return Err(Error::TruthTable(format!("unknown preset {other:?}"))),
        };
        let rows = [(false, false), (false, true), (true, false), (true, true)]
            .into_iter()
            .map(|(a, b)| TruthRow {
                inputs: vec![a, b],
                outputs: f(a, b),
            })
            .collect();
        Self::new(rows)
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn rows(&self) -> &[TruthRow] {
        &self.rows
    }

    /// Swaps two input columns.
    pub fn swap_inputs(&self, a: usize, b: usize) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut inputs = r.inputs.clone();
                inputs.swap(a, b);
                TruthRow {
                    inputs,
                    outputs: r.outputs.clone(),
                }
            })
            .collect();
        Self { rows, ..*self }
    }
}

impl TryFrom<Vec<String>> for TruthTable {
    type Error = String;

    fn try_from(rows: Vec<String>) -> std::result::Result<Self, String> {
        TruthTable::parse(&rows).map_err(|e| e.to_string())
    }
}

impl From<TruthTable> for Vec<String> {
    fn from(t: TruthTable) -> Self {
        t.rows.iter().map(|r| r.to_string()).collect()
    }
}

/// A binary-dot-logic output pair. The bit is 1 when the electron sits on
/// `dot_one`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPort {
    pub dot_one: LatticeSite,
    pub dot_zero: LatticeSite,
}

/// Perturbers that are present exactly when the input bit is 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputPort {
    pub perturber_sites: Vec<LatticeSite>,
}

/// Rectangular placement region.
///
/// Canvas rows are either every surface sub-row starting at dimer row `row`
/// (`sub = None`, two canvas rows per dimer row) or a single sub-row of each
/// dimer row (`sub = Some(s)`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Canvas {
    pub col: i32,
    pub row: i32,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub: Option<u8>,
}

impl Canvas {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Site at raster position `(y, x)`.
    pub fn site(&self, y: usize, x: usize) -> LatticeSite {
        let col = self.col + x as i32;
        match self.sub {
            None => {
                let half = 2 * self.row + y as i32;
                LatticeSite::new(col, half.div_euclid(2), half.rem_euclid(2) as u8)
            }
            Some(s) => LatticeSite::new(col, self.row + y as i32, s),
        }
    }

    /// Site at row-major index.
    pub fn site_at(&self, index: usize) -> LatticeSite {
        self.site(index / self.width, index % self.width)
    }

    /// Raster coordinates of any site, possibly outside the canvas.
    pub fn raster(&self, site: LatticeSite) -> (i64, i64) {
        let y = match self.sub {
            None => (2 * site.row as i64 + site.sub as i64) - 2 * self.row as i64,
            Some(_) => site.row as i64 - self.row as i64,
        };
        (y, site.col as i64 - self.col as i64)
    }

    pub fn index_of(&self, site: LatticeSite) -> Option<usize> {
        if let Some(s) = self.sub {
            if site.sub != s {
                return None;
            }
        }
        let (y, x) = self.raster(site);
        if y < 0 || x < 0 || y >= self.height as i64 || x >= self.width as i64 {
            return None;
        }
        Some(y as usize * self.width + x as usize)
    }

    pub fn contains(&self, site: LatticeSite) -> bool {
        self.index_of(site).is_some()
    }

    pub fn sites(&self) -> impl Iterator<Item = LatticeSite> + '_ {
        (0..self.len()).map(|i| self.site_at(i))
    }

    /// Twice the column of the vertical mirror axis through the canvas centre.
    pub fn mirror_axis2(&self) -> i32 {
        2 * self.col + self.width as i32 - 1
    }

    /// Canvas index of the mirror image of the site at `index`.
    pub fn mirror_index(&self, index: usize) -> usize {
        let (y, x) = (index / self.width, index % self.width);
        y * self.width + (self.width - 1 - x)
    }
}

/// How satisfied rows are counted for rewards.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowCounting {
    /// A row counts only when every output matches.
    #[default]
    Rows,
    /// Every (row, output) pair counts separately.
    RowOutputs,
}

/// A gate design problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateTask {
    pub scaffold: DbLayout,
    pub inputs: Vec<InputPort>,
    pub outputs: Vec<OutputPort>,
    pub canvas: Canvas,
    pub max_placements: usize,
    pub table: TruthTable,
    #[serde(default)]
    pub counting: RowCounting,
}

impl GateTask {
    pub fn validate(&self, geom: &LatticeGeometry) -> Result<()> {
        if self.inputs.len() != self.table.n_inputs() {
            return Err(Error::Task(format!(
                "{} input ports for a {}-input table",
                self.inputs.len(),
                self.table.n_inputs()
            )));
        }
        if self.outputs.len() != self.table.n_outputs() {
            return Err(Error::Task(format!(
                "{} output ports for a {}-output table",
                self.outputs.len(),
                self.table.n_outputs()
            )));
        }
        if self.max_placements == 0 {
            return Err(Error::Task("max_placements must be at least 1".into()));
        }
        if self.canvas.width == 0 || self.canvas.height == 0 {
            return Err(Error::Task("canvas is empty".into()));
        }
        if matches!(self.canvas.sub, Some(s) if s > 1) {
            return Err(Error::Task("canvas sub must be 0 or 1".into()));
        }
        self.scaffold.check_adjacency(geom)?;
        for port in &self.outputs {
            if port.dot_one == port.dot_zero {
                return Err(Error::Task(format!("output port uses {} twice", port.dot_one)));
            }
        }
        for port in &self.inputs {
            if port.perturber_sites.is_empty() {
                return Err(Error::Task("input port without perturbers".into()));
            }
        }
        // every fixed site is distinct (outputs may repeat scaffold sites)
        let mut owners: HashMap<LatticeSite, &'static str> = HashMap::new();
        for &s in self.scaffold.sites() {
            owners.insert(s, "scaffold");
        }
        for port in &self.outputs {
            for s in [port.dot_one, port.dot_zero] {
                match owners.insert(s, "output") {
                    Some("output") => return Err(Error::Task(format!("site {s} used by two outputs"))),
                    _ => {}
                }
            }
        }
        for port in &self.inputs {
            for &s in &port.perturber_sites {
                if let Some(owner) = owners.insert(s, "input") {
                    return Err(Error::Task(format!("perturber {s} overlaps a {owner} site")));
                }
            }
        }
        for &s in owners.keys() {
            if self.canvas.contains(s) {
                return Err(Error::Task(format!("canvas overlaps fixed site {s}")));
            }
        }
        // the all-ones row contains every fixed site at once
        let all = self.fixed_sites();
        all.check_adjacency(geom)?;
        Ok(())
    }

    /// Number of reward units per the counting mode.
    pub fn unit_count(&self) -> usize {
        match self.counting {
            RowCounting::Rows => self.table.rows().len(),
            RowCounting::RowOutputs => self.table.rows().len() * self.table.n_outputs(),
        }
    }

    /// Scaffold, output dots and every perturber of every input.
    pub fn fixed_sites(&self) -> DbLayout {
        self.scaffold
            .sites()
            .iter()
            .copied()
            .chain(self.outputs.iter().flat_map(|p| [p.dot_one, p.dot_zero]))
            .chain(self.inputs.iter().flat_map(|p| p.perturber_sites.iter().copied()))
            .collect()
    }

    /// The task reflected across the canvas's vertical centre axis, with
    /// input ports reversed so that mirrored perturbers keep their index.
    pub fn mirrored(&self) -> GateTask {
        let axis2 = self.canvas.mirror_axis2();
        GateTask {
            scaffold: self.scaffold.mirrored(axis2),
            inputs: self
                .inputs
                .iter()
                .map(|p| InputPort {
                    perturber_sites: p.perturber_sites.iter().map(|s| s.mirrored(axis2)).collect(),
                })
                .collect(),
            outputs: self
                .outputs
                .iter()
                .map(|p| OutputPort {
                    dot_one: p.dot_one.mirrored(axis2),
                    dot_zero: p.dot_zero.mirrored(axis2),
                })
                .collect(),
            ..self.clone()
        }
    }
}

/// Layout simulated for one truth-table row.
pub fn assemble_row_layout(
    task: &GateTask,
    placed: &DbLayout,
    row_index: usize,
    geom: &LatticeGeometry,
) -> Result<DbLayout> {
    let row = task
        .table
        .rows()
        .get(row_index)
        .ok_or_else(|| Error::Task(format!("row index {row_index} out of range")))?;
    let fixed = task.fixed_sites();
    for &s in placed.sites() {
        if !task.canvas.contains(s) {
            return Err(Error::Assembly(s, "outside the canvas".into()));
        }
        if fixed.contains(s) {
            return Err(Error::Assembly(s, "occupied by a fixed site".into()));
        }
        if let Some(&f) = fixed.sites().iter().find(|&&f| geom.is_adjacent(f, s)) {
            return Err(Error::Assembly(s, format!("adjacent to fixed site {f}")));
        }
    }
    placed.check_adjacency(geom)?;

    let mut sites: Vec<LatticeSite> = task.scaffold.sites().to_vec();
    sites.extend(placed.sites());
    sites.extend(task.outputs.iter().flat_map(|p| [p.dot_one, p.dot_zero]));
    for (port, &bit) in task.inputs.iter().zip(&row.inputs) {
        if bit {
            sites.extend(&port.perturber_sites);
        }
    }
    Ok(sites.into_iter().collect())
}

/// Value read from an output pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputRead {
    Zero,
    One,
    Ambiguous,
}

pub fn read_output(port: &OutputPort, layout: &DbLayout, cfg: &ChargeConfig) -> Result<OutputRead> {
    let one = layout
        .index_of(port.dot_one)
        .ok_or(Error::MissingPortDot(port.dot_one))?;
    let zero = layout
        .index_of(port.dot_zero)
        .ok_or(Error::MissingPortDot(port.dot_zero))?;
    if cfg.len() != layout.len() {
        return Err(Error::Misaligned {
            expected: layout.len(),
            got: cfg.len(),
        });
    }
    use ChargeState::{Negative, Neutral};
    Ok(match (cfg.0[one], cfg.0[zero]) {
        (Negative, Neutral) => OutputRead::One,
        (Neutral, Negative) => OutputRead::Zero,
        _ => OutputRead::Ambiguous,
    })
}

/// Ground-state solver selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Exact enumeration; falls back to annealing above the size limit.
    Exhaustive,
    #[default]
    Anneal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub kind: SolverKind,
    pub model: ChargeModel,
    pub exhaustive_limit: usize,
    pub schedule: AnnealSchedule,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kind: SolverKind::default(),
            model: ChargeModel::ThreeState,
            exhaustive_limit: DEFAULT_EXHAUSTIVE_LIMIT,
            schedule: AnnealSchedule::default(),
            seed: 0,
        }
    }
}

/// Why a row failed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum FailReason {
    Unconverged,
    PositiveCharge,
    Ambiguous { port: usize },
    WrongOutput { port: usize },
}

impl fmt::Display for FailReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailReason::Unconverged => write!(f, "unconverged"),
            FailReason::PositiveCharge => write!(f, "positive charge"),
            FailReason::Ambiguous { port } => write!(f, "output {port} ambiguous"),
            FailReason::WrongOutput { port } => write!(f, "output {port} wrong"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowVerdict {
    Pass,
    Fail(FailReason),
}

impl RowVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, RowVerdict::Pass)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// Satisfied units per the task's counting mode.
    pub satisfied_rows: usize,
    pub per_row: Vec<RowVerdict>,
    /// Pass flag per counting unit (row, or row x output).
    pub unit_pass: Vec<bool>,
    /// Ground-state energy per row, if converged.
    pub energies: Vec<Option<f64>>,
    pub working: bool,
}

/// Evaluates layouts against a task, caching ground states by assembled
/// layout. The cache is shared by every clone.
#[derive(Clone)]
pub struct Evaluator {
    geometry: LatticeGeometry,
    params: PhysParams,
    solver: SolverConfig,
    cache: Arc<Mutex<HashMap<DbLayout, Arc<GroundStateResult>>>>,
    solves: Arc<AtomicUsize>,
}

/// Cache entries beyond which the ground-state cache is cleared.
const CACHE_LIMIT: usize = 400_000;

impl Evaluator {
    pub fn new(geometry: LatticeGeometry, params: PhysParams, solver: SolverConfig) -> Self {
        Self {
            geometry,
            params,
            solver,
            cache: Arc::default(),
            solves: Arc::default(),
        }
    }

    pub fn geometry(&self) -> &LatticeGeometry {
        &self.geometry
    }

    pub fn params(&self) -> &PhysParams {
        &self.params
    }

    pub fn solver(&self) -> &SolverConfig {
        &self.solver
    }

    /// Same physics with another solver and a fresh cache.
    pub fn with_solver(&self, solver: SolverConfig) -> Self {
        Self::new(self.geometry, self.params, solver)
    }

    /// Number of ground-state computations performed (cache misses).
    pub fn solve_count(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    pub fn ground_state(&self, layout: &DbLayout) -> Arc<GroundStateResult> {
        if let Some(hit) = self.cache.lock().unwrap().get(layout) {
            return Arc::clone(hit);
        }
        let result = Arc::new(self.solve(layout));
        self.solves.fetch_add(1, Ordering::Relaxed);
        let mut cache = self.cache.lock().unwrap();
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(layout.clone(), Arc::clone(&result));
        result
    }

    fn solve(&self, layout: &DbLayout) -> GroundStateResult {
        let s = &self.solver;
        if s.kind == SolverKind::Exhaustive && layout.len() <= s.exhaustive_limit {
            if let Ok(r) =
                exhaustive_ground_states(layout, &self.geometry, &self.params, s.model, s.exhaustive_limit)
            {
                return r;
            }
        }
        anneal_ground_state(
            layout,
            &self.geometry,
            &self.params,
            s.model,
            &s.schedule,
            layout_seed(layout, s.seed),
        )
    }

    pub fn evaluate(&self, task: &GateTask, placed: &DbLayout) -> Result<EvalResult> {
        let rows = task.table.rows();
        let mut per_row = Vec::with_capacity(rows.len());
        let mut unit_pass = Vec::with_capacity(task.unit_count());
        let mut energies = Vec::with_capacity(rows.len());
        for (r, row) in rows.iter().enumerate() {
            let layout = assemble_row_layout(task, placed, r, &self.geometry)?;
            let gs = self.ground_state(&layout);
            let (verdict, outputs_ok) = judge_row(task, row, &layout, &gs)?;
            match task.counting {
                RowCounting::Rows => unit_pass.push(verdict.passed()),
                RowCounting::RowOutputs => unit_pass.extend(outputs_ok),
            }
            energies.push(gs.converged.then_some(gs.energy));
            per_row.push(verdict);
        }
        let working = per_row.iter().all(RowVerdict::passed);
        Ok(EvalResult {
            satisfied_rows: unit_pass.iter().filter(|&&p| p).count(),
            per_row,
            unit_pass,
            energies,
            working,
        })
    }
}

/// Seed for annealing a layout, derived from its sites so results do not
/// depend on evaluation order.
fn layout_seed(layout: &DbLayout, base: u64) -> u64 {
    // FNV-1a over the canonical triplets
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base;
    for s in layout.sites() {
        for b in s
            .col
            .to_le_bytes()
            .into_iter()
            .chain(s.row.to_le_bytes())
            .chain([s.sub])
        {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Verdict for one row, plus per-output correctness for finer counting.
fn judge_row(
    task: &GateTask,
    row: &TruthRow,
    layout: &DbLayout,
    gs: &GroundStateResult,
) -> Result<(RowVerdict, Vec<bool>)> {
    let n_out = task.outputs.len();
    if !gs.converged || gs.configs.is_empty() {
        return Ok((RowVerdict::Fail(FailReason::Unconverged), vec![false; n_out]));
    }
    let mut outputs_ok = vec![true; n_out];
    let mut first_failure: Option<FailReason> = None;
    for (k, port) in task.outputs.iter().enumerate() {
        for cfg in &gs.configs {
            let read = read_output(port, layout, cfg)?;
            let expected = if row.outputs[k] {
                OutputRead::One
            } else {
                OutputRead::Zero
            };
            if read != expected {
                outputs_ok[k] = false;
                first_failure.get_or_insert(if read == OutputRead::Ambiguous {
                    FailReason::Ambiguous { port: k }
                } else {
                    FailReason::WrongOutput { port: k }
                });
            }
        }
    }
    if gs.contains_positive {
        return Ok((RowVerdict::Fail(FailReason::PositiveCharge), vec![false; n_out]));
    }
    Ok(match first_failure {
        Some(reason) => (RowVerdict::Fail(reason), outputs_ok),
        None => (RowVerdict::Pass, outputs_ok),
    })
}

/// One-shot evaluation without a persistent cache.
pub fn evaluate_layout(
    task: &GateTask,
    placed: &DbLayout,
    solver: &SolverConfig,
    geom: &LatticeGeometry,
    p: &PhysParams,
) -> Result<EvalResult> {
    Evaluator::new(*geom, *p, *solver).evaluate(task, placed)
}

/// Site on "half-row" `h`: dimer row `h / 2`, sub-row `h % 2`.
pub fn half_row_site(col: i32, h: i32) -> LatticeSite {
    LatticeSite::new(col, h.div_euclid(2), h.rem_euclid(2) as u8)
}

/// Names accepted by [`GateTask::template`].
pub const TEMPLATES: [&str; 7] = ["or", "and", "nand", "nor", "xor", "xnor", "half_adder"];

impl GateTask {
    /// Built-in two-input gate task.
    ///
    /// Input perturbers sit above the canvas corners, mirrored across the
    /// canvas centre column. Each output is a vertical dot pair below the
    /// canvas with a weak-spring dot further down that biases it towards
    /// `dot_zero` (the upper dot). Single-output templates use a 7x5 canvas
    /// and are symmetric under reflection across the centre column; the half
    /// adder uses a 9x5 canvas with sum and carry pairs side by side.
    pub fn template(name: &str) -> Result<GateTask> {
        let key = name.to_ascii_lowercase().replace('-', "_");
        let table = TruthTable::preset(&key)?;
        let two_outputs = table.n_outputs() == 2;
        let width: usize = if two_outputs { 9 } else { 7 };
        let right = width as i32 - 1;
        let output_cols = if two_outputs {
            vec![2, right - 2]
        } else {
            vec![right / 2]
        };
        // single-output perturbers sit one half-row lower
        let perturber_row = if two_outputs { 0 } else { 1 };
        Ok(GateTask {
            scaffold: output_cols.iter().map(|&c| half_row_site(c, 17)).collect(),
            inputs: [-2, right + 2]
                .into_iter()
                .map(|c| InputPort {
                    perturber_sites: vec![half_row_site(c, perturber_row)],
                })
                .collect(),
            outputs: output_cols
                .iter()
                .map(|&c| OutputPort {
                    dot_one: half_row_site(c, 11),
                    dot_zero: half_row_site(c, 9),
                })
                .collect(),
            canvas: Canvas {
                col: 0,
                row: 1,
                width,
                height: 5,
                sub: None,
            },
            max_placements: if two_outputs { 15 } else { 8 },
            table,
            counting: if two_outputs {
                RowCounting::RowOutputs
            } else {
                RowCounting::Rows
            },
        })
    }
}
