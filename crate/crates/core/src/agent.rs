//! Double-DQN training loop: epsilon-greedy acting, uniform replay and
//! periodic target synchronisation.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, LayoutRecord, Provenance, SolutionRegistry};
use crate::error::{Error, Result};
use crate::harness::{epoch_metrics, MetricRow};
use crate::io_cli::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::qnet::{masked_argmax, sync_target, train_batch, Adam, AdamConfig, NetConfig, QNetwork, Transition};

/// Linear exploration decay, held at `eps_min` after `anneal_fraction`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsilonSchedule {
    pub eps_start: f64,
    pub eps_min: f64,
    pub anneal_fraction: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            eps_start: 1.0,
            eps_min: 0.1,
            anneal_fraction: 0.8,
        }
    }
}

impl EpsilonSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.eps_min
            && self.eps_min <= self.eps_start
            && self.eps_start <= 1.0
            && self.anneal_fraction > 0.0
            && self.anneal_fraction <= 1.0;
        if !ok {
            return Err(Error::Config(format!("invalid epsilon schedule {self:?}")));
        }
        Ok(())
    }

    /// Exploration rate at `progress` in `[0, 1]` of the step budget.
    pub fn epsilon_at(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0).min(self.anneal_fraction);
        let eps = self.eps_start - (self.eps_start - self.eps_min) * p / self.anneal_fraction;
        eps.max(self.eps_min)
    }
}

/// Fixed-capacity FIFO of transitions with seeded uniform sampling.
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    /// Slot that the next push overwrites once full.
    head: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            capacity,
            storage: Vec::with_capacity(capacity.min(1 << 16)),
            head: 0,
            rng,
        }
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Transitions from oldest to newest.
    pub fn iter_fifo(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.storage.split_at(self.head);
        older.iter().chain(newer)
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample(&mut self, n: usize) -> Vec<&Transition> {
        if self.storage.is_empty() {
            return Vec::new();
        }
        let len = self.storage.len();
        let idx: Vec<usize> = (0..n).map(|_| self.rng.gen_range(0..len)).collect();
        idx.into_iter().map(|i| &self.storage[i]).collect()
    }
}

/// Independent seeds for each source of randomness.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub net_init: u64,
    /// Action selection; the replay sampler uses a separate stream of it.
    pub exploration: u64,
    pub annealer: u64,
}

impl Seeds {
    pub fn from_base(base: u64) -> Self {
        Self {
            net_init: base,
            exploration: base.wrapping_add(1_000_003),
            annealer: base.wrapping_add(2_000_003),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    /// Environment steps in the whole run.
    pub total_steps: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub train_every: u64,
    /// Target sync cadence, in training steps.
    pub target_sync_every: u64,
    pub gamma: f64,
    pub replay_capacity: usize,
    pub episodes_per_epoch: usize,
    /// Checkpoint cadence in epochs; 0 disables periodic checkpoints.
    pub checkpoint_every_epochs: usize,
    pub epsilon: EpsilonSchedule,
    pub network: NetConfig,
    pub optimizer: AdamConfig,
    pub seeds: Seeds,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            total_steps: 30_000,
            batch_size: 64,
            warmup_steps: 1_000,
            train_every: 1,
            target_sync_every: 500,
            gamma: 0.99,
            replay_capacity: 100_000,
            episodes_per_epoch: 50,
            checkpoint_every_epochs: 10,
            epsilon: EpsilonSchedule::default(),
            network: NetConfig::default(),
            optimizer: AdamConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = self.total_steps > 0
            && self.batch_size > 0
            && self.train_every > 0
            && self.target_sync_every > 0
            && self.replay_capacity > 0
            && self.episodes_per_epoch > 0;
        if !positive {
            return Err(Error::Config("hyperparameters must be positive".into()));
        }
        if self.total_steps < self.warmup_steps {
            return Err(Error::Config(format!(
                "total_steps {} is below warmup_steps {}",
                self.total_steps, self.warmup_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.epsilon.validate()
    }
}

/// Everything recorded about one episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: u64,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub exploratory: Vec<bool>,
    pub found_new_solution: bool,
    /// Ended by the run's step budget rather than by the environment.
    pub truncated: bool,
    pub final_satisfied: usize,
    /// Exploration rate at the episode's last step.
    pub epsilon: f64,
    pub loss_sum: f64,
    pub loss_count: u64,
    pub diagnostics: Vec<String>,
}

impl EpisodeLog {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// How actions are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    /// Epsilon-greedy with training.
    Learn,
    /// Uniform over valid actions with no network and no training.
    Random,
}

/// Learner state: networks, optimizer, replay and counters.
pub struct Agent {
    pub online: QNetwork,
    pub target: QNetwork,
    pub optimizer: Adam,
    pub buffer: ReplayBuffer,
    pub hp: Hyperparams,
    pub policy: Policy,
    rng: ChaCha8Rng,
    pub env_steps: u64,
    pub train_steps: u64,
    pub episodes: u64,
}

impl Agent {
    pub fn new(env: &Environment, hp: &Hyperparams, policy: Policy) -> Result<Self> {
        hp.validate()?;
        let online = QNetwork::new(&hp.network, env.observation_shape(), env.n_actions(), hp.seeds.net_init)?;
        let target = sync_target(&online);
        let optimizer = Adam::new(&online, hp.optimizer);
        Ok(Self {
            online,
            target,
            optimizer,
            buffer: ReplayBuffer::new(hp.replay_capacity, hp.seeds.exploration),
            hp: hp.clone(),
            policy,
            rng: ChaCha8Rng::seed_from_u64(hp.seeds.exploration),
            env_steps: 0,
            train_steps: 0,
            episodes: 0,
        })
    }

    pub fn epsilon(&self) -> f64 {
        match self.policy {
            Policy::Random => 1.0,
            Policy::Learn => self
                .hp
                .epsilon
                .epsilon_at(self.env_steps as f64 / self.hp.total_steps as f64),
        }
    }

    /// Epsilon-greedy choice; returns the action and whether it was exploratory.
    pub fn select_action(&mut self, obs: &[f64], mask: &[bool], epsilon: f64) -> Result<Option<(usize, bool)>> {
        let valid: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if valid.is_empty() {
            return Ok(None);
        }
        if self.rng.gen::<f64>() < epsilon {
            return Ok(valid.choose(&mut self.rng).map(|&a| (a, true)));
        }
        let q = self.online.forward(obs)?;
        Ok(masked_argmax(&q, mask).map(|a| (a, false)))
    }

    fn maybe_train(&mut self, log: &mut EpisodeLog) {
        if self.policy != Policy::Learn
            || self.env_steps < self.hp.warmup_steps
            || self.env_steps % self.hp.train_every != 0
            || self.buffer.len() < self.hp.batch_size
        {
            return;
        }
        let batch: Vec<Transition> = self
            .buffer
            .sample(self.hp.batch_size)
            .into_iter()
            .cloned()
            .collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        match train_batch(&mut self.online, &self.target, &mut self.optimizer, &refs, self.hp.gamma) {
            Ok(loss) => {
                log.loss_sum += loss;
                log.loss_count += 1;
                self.train_steps += 1;
                if self.train_steps % self.hp.target_sync_every == 0 {
                    self.target = sync_target(&self.online);
                }
            }
            Err(e) => log.diagnostics.push(format!("step {}: {e}", self.env_steps)),
        }
    }

    /// Runs one episode, stopping early if the run's step budget runs out.
    pub fn run_episode(&mut self, env: &Environment, registry: &SolutionRegistry) -> Result<EpisodeLog> {
        let mut log = EpisodeLog {
            episode: self.episodes,
            ..EpisodeLog::default()
        };
        let mut state = env.reset()?;
        let mut obs = Arc::new(env.encode_state(&state).data);
        log.final_satisfied = state.satisfied;
        loop {
            if self.env_steps >= self.hp.total_steps {
                log.truncated = true;
                break;
            }
            let eps = self.epsilon();
            log.epsilon = eps;
            let Some((action, explored)) = self.select_action(&obs, &state.mask, eps)? else {
                break;
            };
            let provenance = Provenance {
                episode: self.episodes,
                step: state.t as u64 + 1,
                seed: self.hp.seeds.net_init,
            };
            let (next, outcome) = env.step(&state, action, registry, provenance)?;
            self.env_steps += 1;
            let next_obs = Arc::new(env.encode_state(&next).data);
            log.actions.push(action);
            log.rewards.push(outcome.reward);
            log.exploratory.push(explored);
            log.final_satisfied = next.satisfied;
            if outcome.info.unconverged_rows > 0 {
                log.diagnostics.push(format!(
                    "step {}: {} unconverged rows",
                    state.t + 1,
                    outcome.info.unconverged_rows
                ));
            }
            if outcome.info.new_solution.is_some() {
                log.found_new_solution = true;
            }
            if self.policy == Policy::Learn {
                self.buffer.push(Transition {
                    state: Arc::clone(&obs),
                    action,
                    reward: outcome.reward,
                    next_state: Arc::clone(&next_obs),
                    terminal: outcome.terminal,
                    next_mask: Arc::new(next.mask.clone()),
                });
                self.maybe_train(&mut log);
            }
            state = next;
            obs = next_obs;
            if outcome.terminal {
                break;
            }
        }
        self.episodes += 1;
        Ok(log)
    }

    pub fn checkpoint_meta(&self, label: &str) -> CheckpointMeta {
        CheckpointMeta {
            label: label.to_string(),
            env_steps: self.env_steps,
            train_steps: self.train_steps,
            episodes: self.episodes,
            seed: self.hp.seeds.net_init,
        }
    }
}

/// Output of a training or control run.
pub struct RunArtifacts {
    pub metrics: Vec<MetricRow>,
    pub episodes: Vec<EpisodeLog>,
    pub solutions: Vec<LayoutRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub agent: Agent,
}

/// Runs episodes until `hp.total_steps` environment steps are consumed.
///
/// With `checkpoint_dir` set, the online network and optimizer are written
/// every `checkpoint_every_epochs` epochs and at the end of the run.
pub fn run_training(
    env: &Environment,
    hp: &Hyperparams,
    policy: Policy,
    registry: &SolutionRegistry,
    checkpoint_dir: Option<&Path>,
) -> Result<RunArtifacts> {
    let mut agent = Agent::new(env, hp, policy)?;
    let mut episodes = Vec::new();
    let mut checkpoints = Vec::new();
    let mut write_checkpoint = |agent: &Agent, label: String| -> Result<()> {
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("{label}.ckpt"));
            save_checkpoint(&path, &agent.online, &agent.optimizer, &agent.checkpoint_meta(&label))?;
            checkpoints.push(path);
        }
        Ok(())
    };
    while agent.env_steps < hp.total_steps {
        let before = agent.env_steps;
        let log = agent.run_episode(env, registry)?;
        episodes.push(log);
        if agent.env_steps == before {
            // no valid action from the initial state
            break;
        }
        let n = episodes.len();
        if policy == Policy::Learn
            && hp.checkpoint_every_epochs > 0
            && n % (hp.episodes_per_epoch * hp.checkpoint_every_epochs) == 0
        {
            write_checkpoint(&agent, format!("epoch-{:05}", n / hp.episodes_per_epoch))?;
        }
    }
    if policy == Policy::Learn {
        write_checkpoint(&agent, "final".to_string())?;
    }
    let metrics = epoch_metrics(&episodes, hp.episodes_per_epoch);
    Ok(RunArtifacts {
        metrics,
        episodes,
        solutions: registry.records(),
        checkpoints,
        agent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnet::Transition;

    fn dummy(i: usize) -> Transition {
        Transition {
            state: Arc::new(vec![i as f64]),
            action: i,
            reward: 0.0,
            next_state: Arc::new(vec![0.0]),
            terminal: false,
            next_mask: Arc::new(vec![]),
        }
    }

    #[test]
    fn epsilon_examples() {
        let s = EpsilonSchedule::default();
        assert_eq!(s.epsilon_at(0.0), 1.0);
        assert_eq!(s.epsilon_at(0.8), 0.1);
        assert_eq!(s.epsilon_at(1.0), 0.1);
        assert_eq!(s.epsilon_at(0.4), 0.55);
    }

    #[test]
    fn buffer_evicts_oldest_first() {
        let mut b = ReplayBuffer::new(3, 0);
        for i in 0..5 {
            b.push(dummy(i));
        }
        assert_eq!(b.len(), 3);
        let order: Vec<usize> = b.iter_fifo().map(|t| t.action).collect();
        assert_eq!(order, vec![2, 3, 4]);
    }

    #[test]
    fn sampling_is_seeded_and_in_bounds() {
        let mut a = ReplayBuffer::new(10, 42);
        let mut b = ReplayBuffer::new(10, 42);
        for i in 0..7 {
            a.push(dummy(i));
            b.push(dummy(i));
        }
        let sa: Vec<usize> = a.sample(20).iter().map(|t| t.action).collect();
        let sb: Vec<usize> = b.sample(20).iter().map(|t| t.action).collect();
        assert_eq!(sa, sb);
        assert!(sa.iter().all(|&x| x < 7));
        assert!(ReplayBuffer::new(4, 0).sample(3).is_empty());
    }

    #[test]
    fn hyperparams_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        let hp = Hyperparams {
            total_steps: 10,
            ..Hyperparams::default()
        };
        assert!(hp.validate().is_err());
        let hp = Hyperparams {
            gamma: 1.5,
            ..Hyperparams::default()
        };
        assert!(hp.validate().is_err());
    }
}
