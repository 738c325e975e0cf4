use proptest::prelude::*;
use sidb_designer::env::{canonical_digest, Provenance, RewardParams, SolutionRegistry};
use sidb_designer::harness::is_mirror_symmetric;
use sidb_designer::io_cli::RunConfig;
use sidb_designer::lattice::{DbLayout, LatticeGeometry, LatticeSite};
use sidb_designer::logic::{
    assemble_row_layout, evaluate_layout, Evaluator, FailReason, GateTask, RowVerdict, SolverConfig, SolverKind,
    TruthTable, TEMPLATES,
};
use sidb_designer::physics::PhysParams;

fn exhaustive() -> SolverConfig {
    SolverConfig {
        kind: SolverKind::Exhaustive,
        ..SolverConfig::default()
    }
}

fn or_task() -> GateTask {
    GateTask::template("or").unwrap()
}

fn evaluator() -> Evaluator {
    Evaluator::new(LatticeGeometry::default(), PhysParams::default(), exhaustive())
}

/// Placement indices that are not blocked by fixed sites.
fn free_sites(task: &GateTask) -> Vec<LatticeSite> {
    let g = LatticeGeometry::default();
    let fixed = task.fixed_sites();
    task.canvas
        .sites()
        .filter(|&s| fixed.sites().iter().all(|&f| !g.is_adjacent(f, s)))
        .collect()
}

/// Smallest working layout with at most two placements.
fn witness(task: &GateTask) -> DbLayout {
    let g = LatticeGeometry::default();
    let ev = evaluator();
    let free = free_sites(task);
    for (i, &a) in free.iter().enumerate() {
        let one = DbLayout::new([a], &g).unwrap();
        if ev.evaluate(task, &one).unwrap().working {
            return one;
        }
        for &b in &free[i + 1..] {
            if let Ok(two) = DbLayout::new([a, b], &g) {
                if ev.evaluate(task, &two).unwrap().working {
                    return two;
                }
            }
        }
    }
    panic!("no working layout with two placements");
}

#[test]
fn presets_and_parsing() {
    let or = TruthTable::preset("or").unwrap();
    let rows: Vec<String> = or.rows().iter().map(|r| r.to_string()).collect();
    assert_eq!(rows, ["00->0", "01->1", "10->1", "11->1"]);
    assert_eq!(TruthTable::parse(&["00:0", "01:1", "10:1", "11:1"]).unwrap(), or);
    let ha = TruthTable::preset("half-adder").unwrap();
    assert_eq!((ha.n_inputs(), ha.n_outputs()), (2, 2));
    assert_eq!(ha.rows()[3].to_string(), "11->01");
    assert!(TruthTable::parse(&["0->1", "0->0"]).is_err());
    assert!(TruthTable::preset("mux").is_err());
}

#[test]
fn every_template_is_valid_and_not_trivially_solved() {
    let g = LatticeGeometry::default();
    let ev = evaluator();
    for name in TEMPLATES {
        let task = GateTask::template(name).unwrap();
        task.validate(&g).unwrap();
        let bare = ev.evaluate(&task, &DbLayout::empty()).unwrap();
        assert!(!bare.working, "{name} works without placements");
        assert!(bare.satisfied_rows < task.unit_count());
    }
}

#[test]
fn reward_examples() {
    let r = RewardParams::default();
    assert_eq!(r.step_reward(1, 0, 4, 15, false), 0.05);
    assert_eq!(r.step_reward(0, 1, 4, 15, false), -0.1 - 0.05);
    assert_eq!(r.step_reward(4, 0, 4, 15, true), 1.0);
    assert_eq!(r.step_reward(0, 0, 4, 8, false), -0.09375);
}

#[test]
fn or_witness_verifies_and_earns_the_win() {
    let task = or_task();
    let w = witness(&task);
    let cfg = RunConfig::default();
    let result = evaluate_layout(&task, &w, &exhaustive(), &cfg.geometry, &cfg.physics).unwrap();
    assert!(result.working);
    assert_eq!(result.satisfied_rows, 4);
    assert!(result.energies.iter().all(Option::is_some));

    let mut c = cfg.clone();
    c.solver = exhaustive();
    let env = c.environment().unwrap();
    let registry = SolutionRegistry::new();
    let mut state = env.reset().unwrap();
    let mut rewards = vec![];
    let n = w.len();
    for (k, &site) in w.sites().iter().enumerate() {
        let a = task.canvas.index_of(site).unwrap();
        let (next, out) = env.step(&state, a, &registry, Provenance::default()).unwrap();
        rewards.push(out.reward);
        assert_eq!(out.terminal, k + 1 == n);
        state = next;
    }
    assert_eq!(*rewards.last().unwrap(), 1.0);
    assert!(registry.contains(&canonical_digest(&w)));

    // a second visit is no longer new
    let mut state = env.reset().unwrap();
    let mut last = None;
    for &site in w.sites() {
        let a = task.canvas.index_of(site).unwrap();
        let (next, out) = env.step(&state, a, &registry, Provenance::default()).unwrap();
        last = Some(out);
        state = next;
    }
    let out = last.unwrap();
    assert!(out.info.working && out.info.new_solution.is_none());
    assert!(out.reward < 0.5);
}

#[test]
fn crowded_placement_fails_on_positive_charge() {
    let task = or_task();
    let g = LatticeGeometry::default();
    let cluster = DbLayout::new(
        [
            LatticeSite::new(2, 1, 0),
            LatticeSite::new(3, 1, 1),
            LatticeSite::new(4, 1, 0),
            LatticeSite::new(2, 2, 0),
        ],
        &g,
    )
    .unwrap();
    let result = evaluator().evaluate(&task, &cluster).unwrap();
    assert!(!result.working);
    assert!(result
        .per_row
        .iter()
        .any(|v| *v == RowVerdict::Fail(FailReason::PositiveCharge)));
}

#[test]
fn relabelled_inputs_give_identical_verdicts() {
    let task = or_task();
    let w = witness(&task);
    let mut swapped = task.clone();
    swapped.inputs.swap(0, 1);
    swapped.table = task.table.swap_inputs(0, 1);
    let ev = evaluator();
    let free = free_sites(&task);
    let g = LatticeGeometry::default();
    let mut layouts = vec![w, DbLayout::empty()];
    layouts.extend(free.iter().step_by(4).map(|&s| DbLayout::new([s], &g).unwrap()));
    for l in &layouts {
        let a = ev.evaluate(&task, l).unwrap();
        let b = ev.evaluate(&swapped, l).unwrap();
        assert_eq!(a.per_row, b.per_row);
    }
}

#[test]
fn mirrored_task_and_layout_agree() {
    let task = or_task();
    assert!(is_mirror_symmetric(&task));
    let axis = task.canvas.mirror_axis2();
    let mirrored = task.mirrored();
    let ev = evaluator();
    let g = LatticeGeometry::default();
    for &s in free_sites(&task).iter().take(12) {
        let l = DbLayout::new([s], &g).unwrap();
        let a = ev.evaluate(&task, &l).unwrap();
        let b = ev.evaluate(&mirrored, &l.mirrored(axis)).unwrap();
        assert_eq!(a.per_row, b.per_row);
    }
}

#[test]
fn cached_layouts_are_not_solved_again() {
    let task = or_task();
    let ev = evaluator();
    let w = witness(&task);
    ev.evaluate(&task, &w).unwrap();
    let solved = ev.solve_count();
    let again = ev.evaluate(&task, &w).unwrap();
    assert_eq!(ev.solve_count(), solved);
    assert!(again.working);
    let clone = ev.clone();
    clone.evaluate(&task, &w).unwrap();
    assert_eq!(ev.solve_count(), solved);
}

#[test]
fn assembly_rejects_bad_placements() {
    let task = or_task();
    let g = LatticeGeometry::default();
    let outside = DbLayout::new([LatticeSite::new(-5, 0, 0)], &g).unwrap();
    assert!(assemble_row_layout(&task, &outside, 0, &g).is_err());
    let on_output = DbLayout::new([task.outputs[0].dot_one], &g).unwrap();
    assert!(assemble_row_layout(&task, &on_output, 0, &g).is_err());
    assert!(assemble_row_layout(&task, &DbLayout::empty(), 4, &g).is_err());
    let bare = assemble_row_layout(&task, &DbLayout::empty(), 3, &g).unwrap();
    assert_eq!(bare.len(), task.fixed_sites().len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_rollouts_respect_the_contract(seed in 0u64..1000, picks in proptest::collection::vec(0usize..1000, 8)) {
        let mut cfg = RunConfig::default();
        cfg.solver = exhaustive();
        let env = cfg.environment().unwrap();
        let registry = SolutionRegistry::new();
        let mut state = env.reset().unwrap();
        for (t, pick) in picks.iter().enumerate() {
            let valid: Vec<usize> = (0..state.mask.len()).filter(|&i| state.mask[i]).collect();
            if valid.is_empty() {
                break;
            }
            let a = valid[pick % valid.len()];
            let prov = Provenance { episode: seed, step: t as u64 + 1, seed };
            let (next, out) = env.step(&state, a, &registry, prov).unwrap();
            prop_assert!((-1.0..=1.0).contains(&out.reward));
            prop_assert_eq!(next.placed.len(), t + 1);
            prop_assert!(next.placed.check_adjacency(&LatticeGeometry::default()).is_ok());
            prop_assert!(!next.mask[a]);
            prop_assert!(env.step(&next, a, &registry, prov).is_err());
            let done = out.terminal;
            state = next;
            if done {
                break;
            }
        }
        prop_assert!(state.t <= env.task().max_placements);
    }
}
