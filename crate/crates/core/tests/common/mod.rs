#![allow(dead_code)]

use sidb_designer::agent::Hyperparams;
use sidb_designer::env::Environment;
use sidb_designer::io_cli::RunConfig;
use sidb_designer::logic::SolverKind;
use sidb_designer::qnet::NetConfig;

pub fn tiny_net() -> NetConfig {
    NetConfig {
        conv_filters: [4, 4, 4],
        kernel: 3,
        dense: [16, 16],
    }
}

/// OR config with a tiny network and step budget.
pub fn tiny_config(total_steps: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.solver.kind = SolverKind::Exhaustive;
    cfg.hyperparams = Hyperparams {
        total_steps,
        batch_size: 8,
        warmup_steps: 40,
        train_every: 2,
        target_sync_every: 20,
        episodes_per_epoch: 10,
        checkpoint_every_epochs: 2,
        network: tiny_net(),
        ..Hyperparams::default()
    };
    cfg
}

pub fn or_env(cfg: &RunConfig) -> Environment {
    cfg.environment().expect("default OR task builds")
}

/// Upper 0.1% point of chi-square with `df` degrees of freedom
/// (Wilson-Hilferty).
pub fn chi2_critical(df: f64) -> f64 {
    let z = 3.090;
    let a = 2.0 / (9.0 * df);
    df * (1.0 - a + z * a.sqrt()).powi(3)
}
