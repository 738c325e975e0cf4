//! Screened-Coulomb electrostatics of SiDB charge configurations.
//!
//! The configuration energy is the pairwise interaction sum only; the
//! charge-transition thresholds enter through the stability criteria. A
//! ground state is the lowest-energy configuration that is both population
//! stable and hop stable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{DbLayout, LatticeGeometry};

/// Energies closer than this are treated as degenerate (eV).
pub const DEGENERACY_TOL: f64 = 1e-9;

/// Slack on the hop criterion so that exactly-degenerate hops count as stable.
const HOP_TOL: f64 = 1e-12;

/// Net charge of a dangling bond in units of the elementary charge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum ChargeState {
    Negative,
    Neutral,
    Positive,
}

impl ChargeState {
    pub fn value(self) -> i8 {
        match self {
            ChargeState::Negative => -1,
            ChargeState::Neutral => 0,
            ChargeState::Positive => 1,
        }
    }
}

impl TryFrom<i8> for ChargeState {
    type Error = String;

    fn try_from(v: i8) -> std::result::Result<Self, String> {
        match v {
            -1 => Ok(ChargeState::Negative),
            0 => Ok(ChargeState::Neutral),
            1 => Ok(ChargeState::Positive),
            other => Err(format!("charge state must be -1, 0 or 1, got {other}")),
        }
    }
}

impl From<ChargeState> for i8 {
    fn from(c: ChargeState) -> i8 {
        c.value()
    }
}

/// Charges index-aligned with a layout's canonical site order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChargeConfig(pub Vec<ChargeState>);

impl ChargeConfig {
    pub fn from_values(values: &[i8]) -> Result<Self> {
        values
            .iter()
            .map(|&v| ChargeState::try_from(v).map_err(Error::Params))
            .collect::<Result<Vec<_>>>()
            .map(ChargeConfig)
    }

    pub fn values(&self) -> Vec<i8> {
        self.0.iter().map(|c| c.value()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn has_positive(&self) -> bool {
        self.0.contains(&ChargeState::Positive)
    }
}

/// Physical constants of the screened-Coulomb model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysParams {
    /// Relative permittivity.
    pub eps_r: f64,
    /// Thomas-Fermi screening length (Angstrom).
    pub lambda_tf: f64,
    /// (0/-) transition threshold (eV).
    pub mu_minus: f64,
    /// (+/0) transition threshold (eV).
    pub mu_plus: f64,
    /// e^2 / (4 pi eps0) in eV Angstrom.
    pub k_coulomb: f64,
}

impl Default for PhysParams {
    fn default() -> Self {
        Self {
            eps_r: 5.6,
            lambda_tf: 50.0,
            mu_minus: -0.25,
            mu_plus: -0.84,
            k_coulomb: 14.3996,
        }
    }
}

impl PhysParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_r > 0.0 && self.eps_r.is_finite()) {
            return Err(Error::Params("eps_r must be positive".into()));
        }
        if !(self.lambda_tf > 0.0 && self.lambda_tf.is_finite()) {
            return Err(Error::Params("lambda_tf must be positive".into()));
        }
        if !(self.mu_plus < self.mu_minus) {
            return Err(Error::Params("mu_plus must be below mu_minus".into()));
        }
        if !(self.mu_minus < 0.0) {
            return Err(Error::Params("mu_minus must be negative".into()));
        }
        if !(self.k_coulomb > 0.0 && self.k_coulomb.is_finite()) {
            return Err(Error::Params("k_coulomb must be positive".into()));
        }
        Ok(())
    }

    /// Energy offset of a charge state relative to neutral in the grand
    /// potential whose single-site minima coincide with the population
    /// stability criteria. Used only to guide annealing.
    fn chemical_offset(&self, n: i8) -> f64 {
        match n {
            -1 => self.mu_minus,
            1 => -self.mu_plus,
            _ => 0.0,
        }
    }

    /// Transition-level correction of an electron hop from a site with charge
    /// `from` to a site with charge `to`. Zero for the ordinary hop between a
    /// negative and a neutral site; non-zero only when the hop creates or
    /// removes a positive charge.
    fn hop_offset(&self, from: i8, to: i8) -> f64 {
        self.chemical_offset(from + 1) - self.chemical_offset(from) + self.chemical_offset(to - 1)
            - self.chemical_offset(to)
    }

    fn population_ok(&self, n: i8, v: f64) -> bool {
        match n {
            -1 => v >= self.mu_minus,
            0 => v < self.mu_minus && v >= self.mu_plus,
            _ => v < self.mu_plus,
        }
    }
}

/// Screened Coulomb interaction energy between two unit charges at distance `d`.
pub fn pair_interaction(d: f64, p: &PhysParams) -> f64 {
    debug_assert!(d > 0.0, "pair distance must be positive");
    p.k_coulomb / p.eps_r * (-d / p.lambda_tf).exp() / d
}

/// Dense symmetric matrix of pair interactions for a layout.
#[derive(Clone, Debug)]
pub struct Interactions {
    n: usize,
    w: Vec<f64>,
}

impl Interactions {
    pub fn new(layout: &DbLayout, geom: &LatticeGeometry, p: &PhysParams) -> Self {
        let sites = layout.sites();
        let n = sites.len();
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let e = pair_interaction(geom.distance(sites[i], sites[j]), p);
                w[i * n + j] = e;
                w[j * n + i] = e;
            }
        }
        Self { n, w }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n + j]
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.w[i * self.n..(i + 1) * self.n]
    }

    /// Local potentials `v_i = sum_{j != i} W_ij n_j`.
    pub fn potentials(&self, charges: &[i8]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(charges)
                    .map(|(w, &c)| w * c as f64)
                    .sum()
            })
            .collect()
    }

    pub fn energy(&self, charges: &[i8]) -> f64 {
        let mut e = 0.0;
        for i in 0..self.n {
            if charges[i] == 0 {
                continue;
            }
            for j in i + 1..self.n {
                e += self.get(i, j) * (charges[i] * charges[j]) as f64;
            }
        }
        e
    }

    /// Grand-potential change of moving one electron from `i` to `j`.
    #[inline]
    fn hop_delta(&self, charges: &[i8], v: &[f64], i: usize, j: usize, p: &PhysParams) -> f64 {
        v[i] - v[j] - self.get(i, j) + p.hop_offset(charges[i], charges[j])
    }

    fn hop_stable(&self, charges: &[i8], v: &[f64], p: &PhysParams) -> bool {
        for i in 0..self.n {
            if charges[i] > 0 {
                continue;
            }
            for j in 0..self.n {
                if i == j || charges[j] < 0 {
                    continue;
                }
                if self.hop_delta(charges, v, i, j, p) < -HOP_TOL {
                    return false;
                }
            }
        }
        true
    }
}

/// Outcome of [`check_stability`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StabilityReport {
    pub population_ok: bool,
    pub hop_ok: bool,
    /// Sites violating population stability, plus both ends of any
    /// energy-lowering hop.
    pub violating_sites: Vec<usize>,
}

impl StabilityReport {
    pub fn is_stable(&self) -> bool {
        self.population_ok && self.hop_ok
    }
}

pub fn config_energy(
    layout: &DbLayout,
    cfg: &ChargeConfig,
    geom: &LatticeGeometry,
    p: &PhysParams,
) -> Result<f64> {
    check_aligned(layout, cfg)?;
    Ok(Interactions::new(layout, geom, p).energy(&cfg.values()))
}

pub fn check_stability(
    layout: &DbLayout,
    cfg: &ChargeConfig,
    geom: &LatticeGeometry,
    p: &PhysParams,
) -> Result<StabilityReport> {
    check_aligned(layout, cfg)?;
    let w = Interactions::new(layout, geom, p);
    Ok(stability_report(&w, &cfg.values(), p))
}

fn check_aligned(layout: &DbLayout, cfg: &ChargeConfig) -> Result<()> {
    if layout.len() != cfg.len() {
        return Err(Error::Misaligned {
            expected: layout.len(),
            got: cfg.len(),
        });
    }
    Ok(())
}

pub(crate) fn stability_report(w: &Interactions, charges: &[i8], p: &PhysParams) -> StabilityReport {
    let v = w.potentials(charges);
    let mut violating = Vec::new();
    for (i, (&n, &vi)) in charges.iter().zip(&v).enumerate() {
        if !p.population_ok(n, vi) {
            violating.push(i);
        }
    }
    let population_ok = violating.is_empty();
    let mut hop_ok = true;
    for i in 0..charges.len() {
        if charges[i] > 0 {
            continue;
        }
        for j in 0..charges.len() {
            if i == j || charges[j] < 0 {
                continue;
            }
            if w.hop_delta(charges, &v, i, j, p) < -HOP_TOL {
                hop_ok = false;
                violating.push(i);
                violating.push(j);
            }
        }
    }
    violating.sort_unstable();
    violating.dedup();
    StabilityReport {
        population_ok,
        hop_ok,
        violating_sites: violating,
    }
}

/// Which charge states the search may assign.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChargeModel {
    /// Neutral or negative only.
    TwoState,
    #[default]
    ThreeState,
}

impl ChargeModel {
    fn states(self) -> &'static [i8] {
        match self {
            ChargeModel::TwoState => &[-1, 0],
            ChargeModel::ThreeState => &[-1, 0, 1],
        }
    }

    fn max_charge(self) -> f64 {
        match self {
            ChargeModel::TwoState => 0.0,
            ChargeModel::ThreeState => 1.0,
        }
    }
}

/// Lowest-energy stable configurations of a layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundStateResult {
    /// Ground-state energy in eV; infinite when no stable configuration was found.
    pub energy: f64,
    /// All degenerate ground states, sorted.
    pub configs: Vec<ChargeConfig>,
    pub contains_positive: bool,
    pub converged: bool,
}

impl GroundStateResult {
    fn unconverged() -> Self {
        Self {
            energy: f64::INFINITY,
            configs: Vec::new(),
            contains_positive: false,
            converged: false,
        }
    }

    fn from_pool(pool: DegeneratePool) -> Self {
        if pool.configs.is_empty() {
            return Self::unconverged();
        }
        let configs: Vec<ChargeConfig> = pool
            .configs
            .into_iter()
            .map(|(_, c)| ChargeConfig::from_values(&c).expect("solver emits valid charges"))
            .collect();
        let contains_positive = configs.iter().any(ChargeConfig::has_positive);
        Self {
            energy: pool.best,
            configs,
            contains_positive,
            converged: true,
        }
    }
}

/// Running set of configurations within [`DEGENERACY_TOL`] of the best energy.
struct DegeneratePool {
    best: f64,
    configs: Vec<(f64, Vec<i8>)>,
}

impl DegeneratePool {
    fn new() -> Self {
        Self {
            best: f64::INFINITY,
            configs: Vec::new(),
        }
    }

    fn offer(&mut self, energy: f64, charges: &[i8]) {
        if energy > self.best + DEGENERACY_TOL {
            return;
        }
        if self.configs.iter().any(|(_, c)| c == charges) {
            return;
        }
        if energy < self.best {
            self.best = energy;
            let best = self.best;
            self.configs.retain(|(e, _)| *e <= best + DEGENERACY_TOL);
        }
        self.configs.push((energy, charges.to_vec()));
    }

    fn finish(mut self) -> Self {
        self.configs.sort_by(|a, b| a.1.cmp(&b.1));
        self
    }
}

/// Default ceiling on the site count accepted by [`exhaustive_ground_states`].
pub const DEFAULT_EXHAUSTIVE_LIMIT: usize = 16;

/// Exact ground states by enumeration of every charge assignment.
///
/// Assignments are built site by site; a branch is cut as soon as some
/// assigned site cannot satisfy its population criterion for any completion
/// of the remaining sites.
pub fn exhaustive_ground_states(
    layout: &DbLayout,
    geom: &LatticeGeometry,
    p: &PhysParams,
    model: ChargeModel,
    limit: usize,
) -> Result<GroundStateResult> {
    if layout.len() > limit {
        return Err(Error::TooLarge {
            sites: layout.len(),
            limit,
        });
    }
    if layout.is_empty() {
        return Ok(GroundStateResult {
            energy: 0.0,
            configs: vec![ChargeConfig::default()],
            contains_positive: false,
            converged: true,
        });
    }
    let w = Interactions::new(layout, geom, p);
    let mut search = Enumerator::new(&w, p, model);
    search.descend(0);
    Ok(GroundStateResult::from_pool(search.pool.finish()))
}

struct Enumerator<'a> {
    w: &'a Interactions,
    p: &'a PhysParams,
    model: ChargeModel,
    charges: Vec<i8>,
    /// Potential at each site from already-assigned sites.
    partial: Vec<f64>,
    /// Interaction weight at each site from unassigned sites.
    pending: Vec<f64>,
    pool: DegeneratePool,
}

impl<'a> Enumerator<'a> {
    fn new(w: &'a Interactions, p: &'a PhysParams, model: ChargeModel) -> Self {
        let n = w.len();
        let pending = (0..n).map(|i| w.row(i).iter().sum()).collect();
        Self {
            w,
            p,
            model,
            charges: vec![0; n],
            partial: vec![0.0; n],
            pending,
            pool: DegeneratePool::new(),
        }
    }

    fn descend(&mut self, k: usize) {
        let n = self.w.len();
        if k == n {
            self.leaf();
            return;
        }
        for i in 0..n {
            self.pending[i] -= self.w.get(i, k);
        }
        for &q in self.model.states() {
            self.charges[k] = q;
            if q != 0 {
                for i in 0..n {
                    self.partial[i] += self.w.get(i, k) * q as f64;
                }
            }
            if self.feasible(k) {
                self.descend(k + 1);
            }
            if q != 0 {
                for i in 0..n {
                    self.partial[i] -= self.w.get(i, k) * q as f64;
                }
            }
        }
        self.charges[k] = 0;
        for i in 0..n {
            self.pending[i] += self.w.get(i, k);
        }
    }

    /// Whether every assigned site can still meet its population criterion.
    fn feasible(&self, k: usize) -> bool {
        let hi_q = self.model.max_charge();
        for i in 0..=k {
            let lo = self.partial[i] - self.pending[i];
            let hi = self.partial[i] + hi_q * self.pending[i];
            let ok = match self.charges[i] {
                -1 => hi >= self.p.mu_minus,
                0 => lo < self.p.mu_minus && hi >= self.p.mu_plus,
                _ => lo < self.p.mu_plus,
            };
            if !ok {
                return false;
            }
        }
        true
    }

    fn leaf(&mut self) {
        let v = self.w.potentials(&self.charges);
        let pop_ok = self
            .charges
            .iter()
            .zip(&v)
            .all(|(&n, &vi)| self.p.population_ok(n, vi));
        if !pop_ok || !self.w.hop_stable(&self.charges, &v, self.p) {
            return;
        }
        let e = self.w.energy(&self.charges);
        self.pool.offer(e, &self.charges);
    }
}

/// Geometric cooling schedule for [`anneal_ground_state`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealSchedule {
    /// Starting temperature (eV).
    pub initial_temperature: f64,
    /// Temperature multiplier applied after every sweep.
    pub decay: f64,
    pub sweeps: usize,
    pub restarts: usize,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            initial_temperature: 0.3,
            decay: 0.9,
            sweeps: 80,
            restarts: 10,
        }
    }
}

/// Simulated-annealing ground-state search.
///
/// Restarts alternate between two Markov chains over the same move set
/// (single-site charge changes and single-electron hops):
///
/// * a chain on the grand potential (pair energy plus threshold offsets),
///   whose low-temperature states are population stable, finished by a
///   zero-temperature quench;
/// * a chain on the pair energy plus a growing penalty on stability
///   violations, which reaches low-energy stable states that carry positive
///   charges and are rarely visited by the first chain.
///
/// Every stable configuration visited is a candidate. The lowest-energy
/// candidates are finally closed under stable single-move neighbours so that
/// degenerate partners are reported.
pub fn anneal_ground_state(
    layout: &DbLayout,
    geom: &LatticeGeometry,
    p: &PhysParams,
    model: ChargeModel,
    schedule: &AnnealSchedule,
    seed: u64,
) -> GroundStateResult {
    if layout.is_empty() {
        return GroundStateResult {
            energy: 0.0,
            configs: vec![ChargeConfig::default()],
            contains_positive: false,
            converged: true,
        };
    }
    let w = Interactions::new(layout, geom, p);
    let mut annealer = Annealer::new(&w, p, model, seed);
    for r in 0..schedule.restarts.max(1) {
        if r % 2 == 0 {
            annealer.run_grand(schedule);
        } else {
            annealer.run_penalized(schedule);
        }
    }
    annealer.close_degenerate();
    GroundStateResult::from_pool(annealer.pool.finish())
}

/// Penalty weight on stability violations at the start and end of a
/// penalized chain (dimensionless multiplier on eV-scale violations).
const PENALTY_START: f64 = 1.0;
const PENALTY_END: f64 = 50.0;

enum Move {
    Site(usize, i8),
    Hop(usize, usize),
}

struct Annealer<'a> {
    w: &'a Interactions,
    p: &'a PhysParams,
    model: ChargeModel,
    rng: ChaCha8Rng,
    charges: Vec<i8>,
    v: Vec<f64>,
    pool: DegeneratePool,
}

impl<'a> Annealer<'a> {
    fn new(w: &'a Interactions, p: &'a PhysParams, model: ChargeModel, seed: u64) -> Self {
        let n = w.len();
        Self {
            w,
            p,
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            charges: vec![-1; n],
            v: vec![0.0; n],
            pool: DegeneratePool::new(),
        }
    }

    fn set_charge(&mut self, i: usize, q: i8) {
        let dq = (q - self.charges[i]) as f64;
        if dq != 0.0 {
            for j in 0..self.w.len() {
                self.v[j] += self.w.get(j, i) * dq;
            }
            self.charges[i] = q;
        }
    }

    fn apply(&mut self, mv: &Move) {
        match *mv {
            Move::Site(i, q) => self.set_charge(i, q),
            Move::Hop(i, j) => {
                self.set_charge(i, self.charges[i] + 1);
                self.set_charge(j, self.charges[j] - 1);
            }
        }
    }

    fn undo(&mut self, mv: &Move, old: (i8, i8)) {
        match *mv {
            Move::Site(i, _) => self.set_charge(i, old.0),
            Move::Hop(i, j) => {
                self.set_charge(i, old.0);
                self.set_charge(j, old.1);
            }
        }
    }

    fn randomize(&mut self) {
        let states = self.model.states();
        for i in 0..self.charges.len() {
            self.charges[i] = states[self.rng.gen_range(0..states.len())];
        }
        self.v = self.w.potentials(&self.charges);
    }

    fn propose(&mut self) -> Option<Move> {
        let n = self.w.len();
        let states = self.model.states();
        if n > 1 && self.rng.gen_bool(0.5) {
            let i = self.rng.gen_range(0..n);
            let j = (i + 1 + self.rng.gen_range(0..n - 1)) % n;
            let (ci, cj) = (self.charges[i], self.charges[j]);
            if !states.contains(&(ci + 1)) || !states.contains(&(cj - 1)) {
                return None;
            }
            Some(Move::Hop(i, j))
        } else {
            let i = self.rng.gen_range(0..n);
            let old = self.charges[i];
            let k = self.rng.gen_range(0..states.len() - 1);
            let q = states.iter().copied().filter(|&q| q != old).nth(k)?;
            Some(Move::Site(i, q))
        }
    }

    /// Grand-potential change of a move, from the current potentials.
    fn grand_delta(&self, mv: &Move) -> f64 {
        match *mv {
            Move::Site(i, q) => {
                let old = self.charges[i];
                (q - old) as f64 * self.v[i] + self.p.chemical_offset(q) - self.p.chemical_offset(old)
            }
            Move::Hop(i, j) => self.w.hop_delta(&self.charges, &self.v, i, j, self.p),
        }
    }

    fn metropolis(&mut self, delta: f64, temperature: f64) -> bool {
        delta <= 0.0 || self.rng.gen::<f64>() < (-delta / temperature).exp()
    }

    fn run_grand(&mut self, schedule: &AnnealSchedule) {
        self.randomize();
        let n = self.w.len();
        let mut temperature = schedule.initial_temperature;
        for _ in 0..schedule.sweeps {
            for _ in 0..n {
                let Some(mv) = self.propose() else { continue };
                let delta = self.grand_delta(&mv);
                if self.metropolis(delta, temperature) {
                    self.apply(&mv);
                }
            }
            temperature *= schedule.decay;
            self.offer_current();
        }
        self.quench();
        self.offer_current();
    }

    fn run_penalized(&mut self, schedule: &AnnealSchedule) {
        self.randomize();
        let n = self.w.len();
        let sweeps = schedule.sweeps.max(1);
        let ramp = (PENALTY_END / PENALTY_START).powf(1.0 / sweeps as f64);
        let mut weight = PENALTY_START;
        let mut temperature = schedule.initial_temperature;
        let mut violation = self.violation();
        for _ in 0..sweeps {
            for _ in 0..n {
                let Some(mv) = self.propose() else { continue };
                let old = match mv {
                    Move::Site(i, _) => (self.charges[i], 0),
                    Move::Hop(i, j) => (self.charges[i], self.charges[j]),
                };
                let de = match mv {
                    Move::Site(i, q) => (q - old.0) as f64 * self.v[i],
                    Move::Hop(i, j) => self.v[i] - self.v[j] - self.w.get(i, j),
                };
                self.apply(&mv);
                let new_violation = self.violation();
                let delta = de + weight * (new_violation - violation);
                if self.metropolis(delta, temperature) {
                    violation = new_violation;
                    if violation == 0.0 {
                        self.offer_current();
                    }
                } else {
                    self.undo(&mv, old);
                }
            }
            temperature *= schedule.decay;
            weight *= ramp;
        }
        self.quench();
        self.offer_current();
    }

    /// Total amount by which the current configuration misses the
    /// population and hop criteria (eV).
    fn violation(&self) -> f64 {
        let p = self.p;
        let mut total = 0.0;
        for (&q, &vi) in self.charges.iter().zip(&self.v) {
            total += match q {
                -1 => (p.mu_minus - vi).max(0.0),
                0 => (vi - p.mu_minus).max(0.0) + (p.mu_plus - vi).max(0.0),
                _ => (vi - p.mu_plus).max(0.0),
            };
            if !p.population_ok(q, vi) && total == 0.0 {
                // boundary equality counts as a (tiny) violation
                total += HOP_TOL;
            }
        }
        let n = self.w.len();
        for i in 0..n {
            if self.charges[i] > 0 {
                continue;
            }
            for j in 0..n {
                if i == j || self.charges[j] < 0 {
                    continue;
                }
                let d = self.w.hop_delta(&self.charges, &self.v, i, j, p);
                if d < -HOP_TOL {
                    total -= d;
                }
            }
        }
        total
    }

    /// Greedy descent on the grand potential until no single move lowers it.
    fn quench(&mut self) {
        let n = self.w.len();
        let states = self.model.states();
        loop {
            let mut improved = false;
            for i in 0..n {
                for &q in states {
                    if q == self.charges[i] {
                        continue;
                    }
                    let mv = Move::Site(i, q);
                    if self.grand_delta(&mv) < -HOP_TOL {
                        self.apply(&mv);
                        improved = true;
                    }
                }
            }
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let (ci, cj) = (self.charges[i], self.charges[j]);
                    if !states.contains(&(ci + 1)) || !states.contains(&(cj - 1)) {
                        continue;
                    }
                    let mv = Move::Hop(i, j);
                    if self.grand_delta(&mv) < -HOP_TOL {
                        self.apply(&mv);
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
    }

    fn offer_current(&mut self) {
        let pop_ok = self
            .charges
            .iter()
            .zip(&self.v)
            .all(|(&n, &vi)| self.p.population_ok(n, vi));
        if pop_ok && self.w.hop_stable(&self.charges, &self.v, self.p) {
            let e = self.w.energy(&self.charges);
            let charges = self.charges.clone();
            self.pool.offer(e, &charges);
        }
    }

    /// Explores stable single-move neighbours of the current best
    /// configurations until no new candidate at or below the best energy
    /// appears.
    fn close_degenerate(&mut self) {
        let n = self.w.len();
        let states = self.model.states();
        let mut frontier: Vec<Vec<i8>> = self.pool.configs.iter().map(|(_, c)| c.clone()).collect();
        let mut seen: std::collections::HashSet<Vec<i8>> = frontier.iter().cloned().collect();
        while let Some(base) = frontier.pop() {
            let mut neighbours = Vec::new();
            for i in 0..n {
                for &q in states {
                    if q != base[i] {
                        let mut c = base.clone();
                        c[i] = q;
                        neighbours.push(c);
                    }
                }
                for j in 0..n {
                    if i != j
                        && states.contains(&(base[i] + 1))
                        && states.contains(&(base[j] - 1))
                    {
                        let mut c = base.clone();
                        c[i] += 1;
                        c[j] -= 1;
                        neighbours.push(c);
                    }
                }
            }
            for c in neighbours {
                if !seen.insert(c.clone()) {
                    continue;
                }
                let v = self.w.potentials(&c);
                let pop_ok = c.iter().zip(&v).all(|(&q, &vi)| self.p.population_ok(q, vi));
                if !pop_ok || !self.w.hop_stable(&c, &v, self.p) {
                    continue;
                }
                let e = self.w.energy(&c);
                if e <= self.pool.best + DEGENERACY_TOL {
                    self.pool.offer(e, &c);
                    frontier.push(c);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeSite;
    use proptest::prelude::*;
    use rand::Rng;

    fn s(col: i32, row: i32, sub: u8) -> LatticeSite {
        LatticeSite::new(col, row, sub)
    }

    fn cfg(v: &[i8]) -> ChargeConfig {
        ChargeConfig::from_values(v).unwrap()
    }

    #[test]
    fn pair_interaction_values() {
        let p = PhysParams::default();
        // (14.3996 / 5.6) * exp(-7.68 / 50) / 7.68
        let expected = 14.3996 / 5.6 * (-0.1536f64).exp() / 7.68;
        assert!((pair_interaction(7.68, &p) - expected).abs() < 1e-15);
        assert!((pair_interaction(7.68, &p) - 0.2871).abs() < 5e-5);
        assert!((pair_interaction(50.0, &p) - 0.01892).abs() < 5e-6);
        assert!(pair_interaction(1e4, &p) < 1e-80);
    }

    #[test]
    fn energies() {
        let (g, p) = (LatticeGeometry::default(), PhysParams::default());
        let pair = DbLayout::new([s(0, 0, 0), s(0, 1, 0)], &g).unwrap();
        let w = pair_interaction(7.68, &p);
        assert_eq!(config_energy(&pair, &cfg(&[0, 0]), &g, &p).unwrap(), 0.0);
        assert!((config_energy(&pair, &cfg(&[-1, -1]), &g, &p).unwrap() - w).abs() < 1e-15);
        assert!((config_energy(&pair, &cfg(&[-1, 1]), &g, &p).unwrap() + w).abs() < 1e-15);
        assert!(matches!(
            config_energy(&pair, &cfg(&[-1]), &g, &p),
            Err(Error::Misaligned { .. })
        ));
    }

    #[test]
    fn stability_examples() {
        let (g, p) = (LatticeGeometry::default(), PhysParams::default());
        let single = DbLayout::new([s(0, 0, 0)], &g).unwrap();
        let r = check_stability(&single, &cfg(&[-1]), &g, &p).unwrap();
        assert!(r.is_stable());
        let r = check_stability(&single, &cfg(&[1]), &g, &p).unwrap();
        assert!(!r.population_ok);
        assert_eq!(r.violating_sites, vec![0]);

        let pair = DbLayout::new([s(0, 0, 0), s(0, 1, 0)], &g).unwrap();
        let r = check_stability(&pair, &cfg(&[-1, -1]), &g, &p).unwrap();
        assert!(!r.population_ok);
        assert_eq!(r.violating_sites, vec![0, 1]);
        assert!(check_stability(&pair, &cfg(&[-1, 0]), &g, &p).unwrap().is_stable());
    }

    #[test]
    fn exhaustive_examples() {
        let (g, p) = (LatticeGeometry::default(), PhysParams::default());
        let empty = exhaustive_ground_states(&DbLayout::empty(), &g, &p, ChargeModel::ThreeState, 16).unwrap();
        assert_eq!(empty.energy, 0.0);
        assert_eq!(empty.configs, vec![ChargeConfig::default()]);

        let single = DbLayout::new([s(3, 2, 1)], &g).unwrap();
        let r = exhaustive_ground_states(&single, &g, &p, ChargeModel::ThreeState, 16).unwrap();
        assert_eq!(r.configs, vec![cfg(&[-1])]);
        assert_eq!(r.energy, 0.0);

        let pair = DbLayout::new([s(0, 0, 0), s(0, 1, 0)], &g).unwrap();
        for model in [ChargeModel::TwoState, ChargeModel::ThreeState] {
            let r = exhaustive_ground_states(&pair, &g, &p, model, 16).unwrap();
            assert_eq!(r.configs, vec![cfg(&[-1, 0]), cfg(&[0, -1])]);
            assert_eq!(r.energy, 0.0);
            assert!(!r.contains_positive);
        }
    }

    #[test]
    fn exhaustive_refuses_oversized_layouts() {
        let (g, p) = (LatticeGeometry::default(), PhysParams::default());
        let big: DbLayout = (0..5).map(|c| s(2 * c, 0, 0)).collect();
        assert!(matches!(
            exhaustive_ground_states(&big, &g, &p, ChargeModel::ThreeState, 4),
            Err(Error::TooLarge { sites: 5, limit: 4 })
        ));
    }

    /// Brute force over all 3^N assignments without pruning.
    fn brute_force(layout: &DbLayout, model: ChargeModel) -> (f64, Vec<Vec<i8>>) {
        let (g, p) = (LatticeGeometry::default(), PhysParams::default());
        let states = model.states();
        let n = layout.len();
        let mut best = f64::INFINITY;
        let mut found: Vec<(f64, Vec<i8>)> = Vec::new();
        let total = states.len().pow(n as u32);
        for code in 0..total {
            let mut c = code;
            let charges: Vec<i8> = (0..n)
                .map(|_| {
                    let q = states[c % states.len()];
                    c /= states.len();
                    q
                })
                .collect();
            let rep = check_stability(layout, &cfg(&charges), &g, &p).unwrap();
            if rep.is_stable() {
                let e = config_energy(layout, &cfg(&charges), &g, &p).unwrap();
                best = best.min(e);
                found.push((e, charges));
            }
        }
        let mut configs: Vec<Vec<i8>> = found
            .into_iter()
            .filter(|(e, _)| *e <= best + DEGENERACY_TOL)
            .map(|(_, c)| c)
            .collect();
        configs.sort();
        (best, configs)
    }

    fn random_layout(rng: &mut ChaCha8Rng, max_sites: usize) -> DbLayout {
        let g = LatticeGeometry::default();
        let count = rng.gen_range(1..=max_sites);
        let mut layout = DbLayout::empty();
        let mut attempts = 0;
        while layout.len() < count && attempts < 500 {
            attempts += 1;
            let site = s(rng.gen_range(0..10), rng.gen_range(0..3), rng.gen_range(0..2));
            if layout.contains(site) || layout.sites().iter().any(|&o| g.is_adjacent(o, site)) {
                continue;
            }
            layout.insert(site);
        }
        layout
    }

    #[test]
    fn pruned_enumeration_matches_brute_force() {
        let (g, p) = (LatticeGeometry::default(), PhysParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let layout = random_layout(&mut rng, 7);
            for model in [ChargeModel::TwoState, ChargeModel::ThreeState] {
                let (e, configs) = brute_force(&layout, model);
                let r = exhaustive_ground_states(&layout, &g, &p, model, 16).unwrap();
                assert!(r.energy == e || (r.energy - e).abs() < 1e-12, "{layout:?} {model:?} {} vs {e}", r.energy);
                let got: Vec<Vec<i8>> = r.configs.iter().map(|c| c.values()).collect();
                assert_eq!(got, configs);
            }
        }
    }

    #[test]
    fn anneal_single_site_and_determinism() {
        let (g, p) = (LatticeGeometry::default(), PhysParams::default());
        let single = DbLayout::new([s(0, 0, 0)], &g).unwrap();
        let r = anneal_ground_state(&single, &g, &p, ChargeModel::ThreeState, &AnnealSchedule::default(), 3);
        assert_eq!(r.configs, vec![cfg(&[-1])]);
        assert_eq!(r.energy, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = random_layout(&mut rng, 10);
        let a = anneal_ground_state(&layout, &g, &p, ChargeModel::ThreeState, &AnnealSchedule::default(), 9);
        let b = anneal_ground_state(&layout, &g, &p, ChargeModel::ThreeState, &AnnealSchedule::default(), 9);
        assert_eq!(a, b);
    }

    #[test]
    fn anneal_results_are_stable_and_never_below_oracle() {
        let (g, p) = (LatticeGeometry::default(), PhysParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for k in 0..20 {
            let layout = random_layout(&mut rng, 9);
            let exact = exhaustive_ground_states(&layout, &g, &p, ChargeModel::ThreeState, 16).unwrap();
            let r = anneal_ground_state(&layout, &g, &p, ChargeModel::ThreeState, &AnnealSchedule::default(), k);
            assert!(r.converged || !exact.converged);
            if !exact.converged {
                assert!(!r.converged);
                continue;
            }
            assert!(r.energy >= exact.energy - DEGENERACY_TOL);
            for c in &r.configs {
                assert!(check_stability(&layout, c, &g, &p).unwrap().is_stable());
            }
        }
    }

    #[test]
    fn isolated_layouts_are_fully_negative() {
        let (g, p) = (LatticeGeometry::default(), PhysParams::default());
        // 17 columns * 3.84 = 65 A and 9 rows * 7.68 = 69 A apart
        let layout: DbLayout = [s(0, 0, 0), s(17, 0, 0), s(0, 9, 1), s(17, 9, 0), s(34, 0, 1)]
            .into_iter()
            .collect();
        let r = exhaustive_ground_states(&layout, &g, &p, ChargeModel::ThreeState, 16).unwrap();
        assert_eq!(r.configs, vec![cfg(&[-1; 5])]);
    }

    fn charges_strategy(n: usize) -> impl Strategy<Value = Vec<i8>> {
        proptest::collection::vec(-1i8..=1, n)
    }

    proptest! {
        #[test]
        fn interaction_decreases_with_distance(d1 in 0.5f64..200.0, d2 in 0.5f64..200.0) {
            prop_assume!(d1 < d2);
            let p = PhysParams::default();
            prop_assert!(pair_interaction(d1, &p) > pair_interaction(d2, &p));
            prop_assert!(pair_interaction(d2, &p) > 0.0);
        }

        #[test]
        fn energy_invariant_under_conjugation_and_reindexing(
            seed in 0u64..1000,
            charges in charges_strategy(6),
        ) {
            let (g, p) = (LatticeGeometry::default(), PhysParams::default());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layout = random_layout(&mut rng, 6);
            let charges = &charges[..layout.len()];
            let e = config_energy(&layout, &cfg(charges), &g, &p).unwrap();
            let neg: Vec<i8> = charges.iter().map(|q| -q).collect();
            let e_neg = config_energy(&layout, &cfg(&neg), &g, &p).unwrap();
            prop_assert!((e - e_neg).abs() < 1e-12);

            // relabel: shift every site, which preserves canonical order
            let moved: DbLayout = layout.sites().iter().map(|s| LatticeSite::new(s.col + 7, s.row - 3, s.sub)).collect();
            let e_moved = config_energy(&moved, &cfg(charges), &g, &p).unwrap();
            prop_assert!((e - e_moved).abs() < 1e-12);

            // mirror reverses the within-row order; permute charges to match
            let mirrored = layout.mirrored(0);
            let permuted: Vec<i8> = mirrored
                .sites()
                .iter()
                .map(|m| charges[layout.index_of(m.mirrored(0)).unwrap()])
                .collect();
            let e_mirror = config_energy(&mirrored, &cfg(&permuted), &g, &p).unwrap();
            prop_assert!((e - e_mirror).abs() < 1e-12);
        }

        #[test]
        fn stable_configs_dominate_oracle(seed in 0u64..500, charges in charges_strategy(7)) {
            let (g, p) = (LatticeGeometry::default(), PhysParams::default());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layout = random_layout(&mut rng, 7);
            let c = cfg(&charges[..layout.len()]);
            let exact = exhaustive_ground_states(&layout, &g, &p, ChargeModel::ThreeState, 16).unwrap();
            if check_stability(&layout, &c, &g, &p).unwrap().is_stable() {
                let e = config_energy(&layout, &c, &g, &p).unwrap();
                prop_assert!(e >= exact.energy - DEGENERACY_TOL);
            }
        }

        #[test]
        fn permissible_hops_never_lower_energy_of_hop_stable(seed in 0u64..500, charges in charges_strategy(7)) {
            let (g, p) = (LatticeGeometry::default(), PhysParams::default());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layout = random_layout(&mut rng, 7);
            let charges = charges[..layout.len()].to_vec();
            let grand = |c: &[i8]| {
                config_energy(&layout, &cfg(c), &g, &p).unwrap()
                    + c.iter().map(|&q| p.chemical_offset(q)).sum::<f64>()
            };
            let report = check_stability(&layout, &cfg(&charges), &g, &p).unwrap();
            if report.hop_ok {
                let e = config_energy(&layout, &cfg(&charges), &g, &p).unwrap();
                let f = grand(&charges);
                for i in 0..charges.len() {
                    for j in 0..charges.len() {
                        if i == j || charges[i] > 0 || charges[j] < 0 {
                            continue;
                        }
                        let mut hopped = charges.clone();
                        hopped[i] += 1;
                        hopped[j] -= 1;
                        if charges[i] == -1 && charges[j] == 0 {
                            let e2 = config_energy(&layout, &cfg(&hopped), &g, &p).unwrap();
                            prop_assert!(e2 >= e - 1e-9);
                        }
                        prop_assert!(grand(&hopped) >= f - 1e-9);
                    }
                }
            }
        }
    }
}
