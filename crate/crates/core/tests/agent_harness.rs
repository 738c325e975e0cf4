mod common;

use common::{chi2_critical, or_env, tiny_config};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sidb_designer::agent::{run_training, Agent, EpisodeLog, Policy};
use sidb_designer::env::SolutionRegistry;
use sidb_designer::harness::{
    epoch_metrics, first_placement_histogram, mann_kendall, seed_convergence_report, total_variation,
    PlacementHistogram,
};
use sidb_designer::io_cli::{episodes_jsonl, metrics_csv, read_episodes_jsonl, read_metrics_csv};

#[test]
fn random_actions_are_uniform_over_valid_sites() {
    let cfg = tiny_config(1000);
    let env = or_env(&cfg);
    let mut agent = Agent::new(&env, &cfg.hyperparams, Policy::Random).unwrap();
    let state = env.reset().unwrap();
    let obs = env.encode_state(&state).data;
    let mut mask = state.mask.clone();
    for i in (0..mask.len()).step_by(3) {
        mask[i] = false;
    }
    let valid: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let n = 20_000;
    let mut counts = vec![0f64; mask.len()];
    for _ in 0..n {
        let (a, explored) = agent.select_action(&obs, &mask, 1.0).unwrap().unwrap();
        assert!(explored && mask[a]);
        counts[a] += 1.0;
    }
    let expected = n as f64 / valid.len() as f64;
    let chi2: f64 = valid.iter().map(|&i| (counts[i] - expected).powi(2) / expected).sum();
    assert!(chi2 < chi2_critical(valid.len() as f64 - 1.0), "chi2 {chi2}");
}

#[test]
fn exploration_fraction_tracks_epsilon() {
    let cfg = tiny_config(1000);
    let env = or_env(&cfg);
    let mut agent = Agent::new(&env, &cfg.hyperparams, Policy::Learn).unwrap();
    let state = env.reset().unwrap();
    let obs = env.encode_state(&state).data;
    for eps in [0.1, 0.55] {
        let n = 10_000;
        let explored = (0..n)
            .filter(|_| agent.select_action(&obs, &state.mask, eps).unwrap().unwrap().1)
            .count();
        let frac = explored as f64 / n as f64;
        assert!((frac - eps).abs() < 0.02, "eps {eps}: explored {frac}");
    }
    assert!(agent.select_action(&obs, &vec![false; state.mask.len()], 0.5).unwrap().is_none());
}

#[test]
fn tiny_training_run_is_deterministic_and_consistent() {
    let cfg = tiny_config(400).with_seed(7);
    let run = || {
        let env = or_env(&cfg);
        let registry = SolutionRegistry::new();
        run_training(&env, &cfg.hyperparams, Policy::Learn, &registry, None).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.episodes, b.episodes);
    assert_eq!(a.metrics, b.metrics);
    let pa: Vec<&Vec<f64>> = a.agent.online.params().iter().map(|p| &p.data).collect();
    let pb: Vec<&Vec<f64>> = b.agent.online.params().iter().map(|p| &p.data).collect();
    assert_eq!(pa, pb);

    let steps: usize = a.episodes.iter().map(EpisodeLog::steps).sum();
    assert_eq!(steps as u64, cfg.hyperparams.total_steps);
    assert!(a.agent.train_steps > 0);
    for log in &a.episodes {
        assert!(log.steps() <= 8);
        assert!(log.rewards.iter().all(|r| (-1.0..=1.0).contains(r)));
        assert_eq!(log.actions.len(), log.exploratory.len());
    }
    let found = a.episodes.iter().filter(|l| l.found_new_solution).count();
    assert_eq!(found, a.solutions.len());
}

#[test]
fn metrics_recompute_from_episode_log() {
    let cfg = tiny_config(300).with_seed(3);
    let env = or_env(&cfg);
    let registry = SolutionRegistry::new();
    let art = run_training(&env, &cfg.hyperparams, Policy::Random, &registry, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ep = dir.path().join("episodes.jsonl");
    std::fs::write(&ep, episodes_jsonl(&art.episodes).unwrap()).unwrap();
    let back = read_episodes_jsonl(&ep).unwrap();
    assert_eq!(back, art.episodes);
    let per_epoch = cfg.hyperparams.episodes_per_epoch;
    assert_eq!(epoch_metrics(&back, per_epoch), art.metrics);

    let m = dir.path().join("metrics.csv");
    std::fs::write(&m, metrics_csv(&art.metrics).unwrap()).unwrap();
    assert_eq!(read_metrics_csv(&m).unwrap(), art.metrics);

    // independent recomputation of the first epoch
    let first = &art.episodes[..per_epoch.min(art.episodes.len())];
    let total: f64 = first.iter().flat_map(|l| l.rewards.iter()).sum();
    let row = &art.metrics[0];
    assert!((row.mean_reward - total / first.len() as f64).abs() < 1e-12);
    assert!(art.metrics.iter().all(|r| r.loss_mean.is_none() && r.epsilon == 1.0));
}

#[test]
fn uniform_first_placements_are_close_to_uniform() {
    let cfg = tiny_config(1000);
    let env = or_env(&cfg);
    let task = env.task().clone();
    let mut agent = Agent::new(&env, &cfg.hyperparams, Policy::Random).unwrap();
    let state = env.reset().unwrap();
    let obs = env.encode_state(&state).data;
    let logs: Vec<EpisodeLog> = (0..10_000)
        .map(|i| EpisodeLog {
            episode: i,
            actions: vec![agent.select_action(&obs, &state.mask, 1.0).unwrap().unwrap().0],
            ..EpisodeLog::default()
        })
        .collect();
    let h = first_placement_histogram(&logs, 1, 10_000, &task.canvas).unwrap();
    let valid = state.mask.iter().filter(|&&m| m).count() as f64;
    let uniform: Vec<f64> = state.mask.iter().map(|&m| if m { 1.0 / valid } else { 0.0 }).collect();
    assert!(total_variation(&h.probabilities(), &uniform) < 0.1);
}

fn uniform_hist(rng: &mut ChaCha8Rng, sites: usize, episodes: u64) -> PlacementHistogram {
    let mut counts = vec![0u64; sites];
    for _ in 0..episodes {
        counts[rng.gen_range(0..sites)] += 1;
    }
    PlacementHistogram {
        epoch: 1,
        height: 5,
        width: 7,
        counts,
        episodes,
    }
}

#[test]
fn random_runs_agree_only_at_chance() {
    let canvas = tiny_config(10).gate_task().unwrap().canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let trials = 2000;
    let mut at_least_3 = 0;
    for _ in 0..trials {
        let hists: Vec<_> = (0..5).map(|_| uniform_hist(&mut rng, canvas.len(), 50)).collect();
        let r = seed_convergence_report(&hists, &canvas).unwrap();
        assert!(r.agreement >= 1 && r.agreement <= 5);
        if r.agreement >= 3 {
            at_least_3 += 1;
        }
    }
    // 20 mirror classes; three or more of five agreeing is rare by chance
    let rate = at_least_3 as f64 / trials as f64;
    assert!(rate < 0.1, "chance agreement rate {rate}");
}

#[test]
fn trend_statistic_detects_monotone_series() {
    let up: Vec<f64> = (0..30).map(|i| i as f64 * 0.01).collect();
    assert!(mann_kendall(&up).z > 3.0);
    let flat = vec![0.5; 30];
    assert_eq!(mann_kendall(&flat).s, 0);
}
