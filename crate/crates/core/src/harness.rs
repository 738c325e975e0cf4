//! Experiment analyses: per-epoch metrics, random-control baselines,
//! first-placement histograms, multi-seed agreement and mirrored replay.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::agent::{run_training, EpisodeLog, Hyperparams, Policy, RunArtifacts};
use crate::env::{Environment, Provenance, SolutionRegistry};
use crate::error::{Error, Result};
use crate::logic::{Canvas, GateTask};

/// One row of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub episodes: usize,
    /// Mean total reward per episode.
    pub mean_reward: f64,
    /// Total reward divided by total steps.
    pub mean_step_reward: f64,
    pub solutions_total: usize,
    pub new_solutions: usize,
    pub epsilon: f64,
    pub loss_mean: Option<f64>,
}

/// Aggregates episodes into epochs of `episodes_per_epoch` (the last epoch
/// may be partial).
pub fn epoch_metrics(logs: &[EpisodeLog], episodes_per_epoch: usize) -> Vec<MetricRow> {
    assert!(episodes_per_epoch >= 1, "episodes_per_epoch must be positive");
    let mut total_solutions = 0;
    logs.chunks(episodes_per_epoch)
        .enumerate()
        .map(|(epoch, chunk)| {
            let rewards: f64 = chunk.iter().map(EpisodeLog::total_reward).sum();
            let steps: usize = chunk.iter().map(EpisodeLog::steps).sum();
            let new_solutions = chunk.iter().filter(|l| l.found_new_solution).count();
            total_solutions += new_solutions;
            let loss_count: u64 = chunk.iter().map(|l| l.loss_count).sum();
            let loss_sum: f64 = chunk.iter().map(|l| l.loss_sum).sum();
            MetricRow {
                epoch: epoch + 1,
                episodes: chunk.len(),
                mean_reward: rewards / chunk.len() as f64,
                mean_step_reward: if steps > 0 { rewards / steps as f64 } else { 0.0 },
                solutions_total: total_solutions,
                new_solutions,
                epsilon: chunk.last().map_or(0.0, |l| l.epsilon),
                loss_mean: (loss_count > 0).then(|| loss_sum / loss_count as f64),
            }
        })
        .collect()
}

/// Mean of `mean_reward` over the last `n` epochs.
pub fn tail_mean_reward(rows: &[MetricRow], n: usize) -> f64 {
    let tail = &rows[rows.len().saturating_sub(n)..];
    tail.iter().map(|r| r.mean_reward).sum::<f64>() / tail.len().max(1) as f64
}

/// The training loop with a uniformly random policy and no learning.
pub fn run_control_baseline(env: &Environment, hp: &Hyperparams, registry: &SolutionRegistry) -> Result<RunArtifacts> {
    run_training(env, hp, Policy::Random, registry, None)
}

/// First-action counts over one epoch, on the canvas raster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementHistogram {
    /// 1-based epoch index.
    pub epoch: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major counts.
    pub counts: Vec<u64>,
    pub episodes: u64,
}

impl PlacementHistogram {
    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.episodes.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Most frequent site, lowest index on ties.
    pub fn modal_site(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        best
    }
}

/// Histogram of the first action of every episode in `epoch` (1-based).
/// Episodes without actions are ignored.
pub fn first_placement_histogram(
    logs: &[EpisodeLog],
    epoch: usize,
    episodes_per_epoch: usize,
    canvas: &Canvas,
) -> Result<PlacementHistogram> {
    if epoch == 0 || episodes_per_epoch == 0 {
        return Err(Error::Config("epochs are 1-based and non-empty".into()));
    }
    let start = (epoch - 1) * episodes_per_epoch;
    let chunk = logs
        .get(start..(start + episodes_per_epoch).min(logs.len()))
        .unwrap_or(&[]);
    let mut counts = vec![0u64; canvas.len()];
    let mut episodes = 0;
    for log in chunk {
        if let Some(&a) = log.actions.first() {
            counts[a] += 1;
            episodes += 1;
        }
    }
    if episodes == 0 {
        return Err(Error::Config(format!("epoch {epoch} has no episodes with actions")));
    }
    Ok(PlacementHistogram {
        epoch,
        height: canvas.height,
        width: canvas.width,
        counts,
        episodes,
    })
}

/// Histogram of the last epoch that has at least one action.
pub fn final_placement_histogram(logs: &[EpisodeLog], episodes_per_epoch: usize, canvas: &Canvas) -> Result<PlacementHistogram> {
    let full = logs.len() / episodes_per_epoch;
    let last = if full == 0 { 1 } else { full };
    first_placement_histogram(logs, last, episodes_per_epoch, canvas)
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Symmetric matrix of total-variation distances.
    pub distances: Vec<Vec<f64>>,
    pub modal_sites: Vec<usize>,
    /// Representative (lowest index) of the plurality mirror class.
    pub plurality_site: usize,
    /// Runs whose modal site equals the plurality site or its mirror image.
    pub agreement: usize,
}

/// Compares final-epoch histograms of several runs on the same canvas.
pub fn seed_convergence_report(hists: &[PlacementHistogram], canvas: &Canvas) -> Result<ConvergenceReport> {
    if hists.len() < 2 {
        return Err(Error::Config("need at least two runs".into()));
    }
    for h in hists {
        if h.height != canvas.height || h.width != canvas.width {
            return Err(Error::Shape(format!(
                "histogram {}x{} does not match canvas {}x{}",
                h.height, h.width, canvas.height, canvas.width
            )));
        }
    }
    let probs: Vec<Vec<f64>> = hists.iter().map(PlacementHistogram::probabilities).collect();
    let distances = probs
        .iter()
        .map(|p| probs.iter().map(|q| total_variation(p, q)).collect())
        .collect();
    let modal_sites: Vec<usize> = hists.iter().map(PlacementHistogram::modal_site).collect();
    let class = |i: usize| i.min(canvas.mirror_index(i));
    let mut tally = vec![0usize; canvas.len()];
    for &m in &modal_sites {
        tally[class(m)] += 1;
    }
    let mut plurality_site = 0;
    for (i, &c) in tally.iter().enumerate() {
        if c > tally[plurality_site] {
            plurality_site = i;
        }
    }
    Ok(ConvergenceReport {
        distances,
        modal_sites,
        plurality_site,
        agreement: tally[plurality_site],
    })
}

/// Mann-Kendall trend test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannKendall {
    pub s: i64,
    pub z: f64,
}

/// Mann-Kendall statistic with the tie-free variance `n(n-1)(2n+5)/18`
/// corrected for tied groups.
pub fn mann_kendall(xs: &[f64]) -> MannKendall {
    let n = xs.len();
    let mut s = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            s += match xs[j].partial_cmp(&xs[i]) {
                Some(std::cmp::Ordering::Greater) => 1,
                Some(std::cmp::Ordering::Less) => -1,
                _ => 0,
            };
        }
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut ties = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * (t - 1.0) * (2.0 * t + 5.0);
        i = j + 1;
    }
    let nf = n as f64;
    let var = (nf * (nf - 1.0) * (2.0 * nf + 5.0) - ties) / 18.0;
    let z = if var <= 0.0 || s == 0 {
        0.0
    } else if s > 0 {
        (s as f64 - 1.0) / var.sqrt()
    } else {
        (s as f64 + 1.0) / var.sqrt()
    };
    MannKendall { s, z }
}

/// Whether reflecting the task across the canvas centre axis yields the same
/// task up to a relabelling of inputs that leaves the truth table invariant.
pub fn is_mirror_symmetric(task: &GateTask) -> bool {
    let m = task.mirrored();
    if m.scaffold != task.scaffold || m.outputs != task.outputs {
        return false;
    }
    let sorted = |p: &[crate::lattice::LatticeSite]| {
        let mut v = p.to_vec();
        v.sort();
        v
    };
    // permutation: mirrored input i plays the role of original input perm[i]
    let mut perm = Vec::with_capacity(task.inputs.len());
    for mp in &m.inputs {
        let target = sorted(&mp.perturber_sites);
        match task
            .inputs
            .iter()
            .position(|p| sorted(&p.perturber_sites) == target)
        {
            Some(j) => perm.push(j),
            None => return false,
        }
    }
    let rows = task.table.rows();
    rows.iter().all(|row| {
        let mut permuted = vec![false; row.inputs.len()];
        for (i, &j) in perm.iter().enumerate() {
            permuted[j] = row.inputs[i];
        }
        rows.iter()
            .find(|r| r.inputs == permuted)
            .is_some_and(|r| r.outputs == row.outputs)
    })
}

/// Action indices reflected across the canvas centre axis.
pub fn mirror_actions(canvas: &Canvas, actions: &[usize]) -> Vec<usize> {
    actions.iter().map(|&a| canvas.mirror_index(a)).collect()
}

/// Replays an action sequence from reset against `registry`, returning the
/// rewards. Stops at the first terminal step.
pub fn replay_actions(env: &Environment, actions: &[usize], registry: &SolutionRegistry) -> Result<Vec<f64>> {
    let mut state = env.reset()?;
    let mut rewards = Vec::with_capacity(actions.len());
    for (t, &a) in actions.iter().enumerate() {
        let provenance = Provenance {
            episode: 0,
            step: t as u64 + 1,
            seed: 0,
        };
        let (next, out) = env.step(&state, a, registry, provenance)?;
        rewards.push(out.reward);
        state = next;
        if out.terminal {
            break;
        }
    }
    Ok(rewards)
}

/// Self-contained SVG line chart of mean reward per epoch. The control run,
/// if any, is drawn dashed.
pub fn reward_chart_svg(runs: &[(String, Vec<MetricRow>)], control: Option<&[MetricRow]>) -> String {
    const W: f64 = 720.0;
    const H: f64 = 420.0;
    const M: f64 = 50.0;
    let all = runs
        .iter()
        .flat_map(|(_, r)| r.iter())
        .chain(control.into_iter().flatten());
    let (mut lo, mut hi, mut max_epoch) = (f64::INFINITY, f64::NEG_INFINITY, 1usize);
    for r in all {
        lo = lo.min(r.mean_reward);
        hi = hi.max(r.mean_reward);
        max_epoch = max_epoch.max(r.epoch);
    }
    if !lo.is_finite() {
        (lo, hi) = (-1.0, 1.0);
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    let x = |e: usize| M + (e as f64 - 1.0) / ((max_epoch as f64 - 1.0).max(1.0)) * (W - 2.0 * M);
    let y = |v: f64| H - M - (v - lo) / (hi - lo) * (H - 2.0 * M);
    let palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"];
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{M}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{b}" stroke="black"/>"#,
        b = H - M,
        r = W - M
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">mean reward</text>"#,
        H / 2.0,
        H / 2.0
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{hi:.2}</text>"#, M - 4.0, M + 4.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{lo:.2}</text>"#, M - 4.0, H - M);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{max_epoch}</text>"#, W - M, H - M + 16.0);
    let mut polyline = |rows: &[MetricRow], colour: &str, dash: &str, label: &str, k: usize| {
        let pts: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", x(r.epoch), y(r.mean_reward)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5"{dash} points="{}"/>"#,
            pts.join(" ")
        );
        let ly = M + 14.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly}" fill="{colour}">{}</text>"#,
            W - M - 110.0,
            xml_escape(label)
        );
    };
    for (k, (label, rows)) in runs.iter().enumerate() {
        polyline(rows, palette[k % palette.len()], "", label, k);
    }
    if let Some(rows) = control {
        polyline(rows, "#555555", r#" stroke-dasharray="6 4""#, "control", runs.len());
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(actions: Vec<usize>, rewards: Vec<f64>, new: bool) -> EpisodeLog {
        EpisodeLog {
            actions,
            rewards,
            found_new_solution: new,
            ..EpisodeLog::default()
        }
    }

    fn canvas() -> Canvas {
        Canvas {
            col: 0,
            row: 0,
            width: 5,
            height: 2,
            sub: None,
        }
    }

    #[test]
    fn single_episode_metrics() {
        let rows = epoch_metrics(&[log(vec![0, 1], vec![-0.05, 1.0], true)], 50);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].mean_step_reward, 0.475);
        assert_eq!(rows[0].mean_reward, 0.95);
        assert_eq!(rows[0].solutions_total, 1);
        assert_eq!(rows[0].loss_mean, None);
    }

    #[test]
    fn losing_epoch_is_non_positive() {
        let logs: Vec<_> = (0..4).map(|_| log(vec![0; 15], vec![-0.05; 15], false)).collect();
        let rows = epoch_metrics(&logs, 2);
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.mean_step_reward <= 0.0));
    }

    #[test]
    fn histogram_point_mass_and_mode() {
        let logs: Vec<_> = (0..6).map(|_| log(vec![3, 1], vec![0.0, 0.0], false)).collect();
        let h = first_placement_histogram(&logs, 1, 6, &canvas()).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), 6);
        assert_eq!(h.counts[3], 6);
        assert_eq!(h.modal_site(), 3);
        assert!(first_placement_histogram(&logs, 2, 6, &canvas()).is_err());
    }

    #[test]
    fn identical_runs_have_zero_distance() {
        let logs: Vec<_> = (0..10).map(|i| log(vec![i % 4], vec![0.0], false)).collect();
        let h = first_placement_histogram(&logs, 1, 10, &canvas()).unwrap();
        let r = seed_convergence_report(&[h.clone(), h.clone(), h], &canvas()).unwrap();
        assert!(r.distances.iter().flatten().all(|&d| d == 0.0));
        assert_eq!(r.agreement, 3);
    }

    #[test]
    fn mirror_modes_agree() {
        let c = canvas();
        let mk = |site: usize| {
            let logs = vec![log(vec![site], vec![0.0], false)];
            first_placement_histogram(&logs, 1, 1, &c).unwrap()
        };
        // 1 and 3 are mirror images on a width-5 canvas; 6 and 8 too.
        let r = seed_convergence_report(&[mk(1), mk(3), mk(6), mk(8), mk(1)], &c).unwrap();
        assert_eq!(r.plurality_site, 1);
        assert_eq!(r.agreement, 3);
    }

    #[test]
    fn mann_kendall_signs() {
        assert!(mann_kendall(&[1.0, 2.0, 3.0, 4.0]).s == 6);
        assert!(mann_kendall(&[4.0, 3.0, 2.0, 1.0]).z < 0.0);
        assert_eq!(mann_kendall(&[1.0, 1.0, 1.0]).s, 0);
    }

    #[test]
    fn svg_is_well_formed() {
        let rows = epoch_metrics(&[log(vec![0], vec![0.2], false), log(vec![1], vec![0.4], false)], 1);
        let svg = reward_chart_svg(&[("seed <1>".into(), rows.clone())], Some(&rows));
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("seed &lt;1&gt;"));
        assert!(svg.contains("stroke-dasharray"));
    }
}
