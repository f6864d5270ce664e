use kve_core::dynamic::{
    check_dynamic_conditions, greedy_eviction_sequence, replay_family, trajectory_bound, DriftingFamily,
    DynamicFamily, DynamicParams, PlantedViolation,
};
use kve_core::submodular::GREEDY_FACTOR;

fn params(k: usize, eps0: f64) -> DynamicParams {
    DynamicParams { k, theta: 0.01, gamma: 0.01, eps0 }
}

#[test]
fn drifting_families_satisfy_bound() {
    for seed in 0..12 {
        let concave = seed % 2 == 0;
        let fam = DriftingFamily::decaying(8, 0.01, 0.002, concave, seed);
        let rep = replay_family(&fam, params(3, 0.0), seed).unwrap();
        assert!(rep.all_conditions_hold(), "seed {seed}: {:?}", rep.first_violation);
        assert!(rep.trajectory_holds);
        assert!(rep.implication_failures.is_empty());
        assert_eq!(rep.steps.len(), 8);
        for s in &rep.steps {
            if let Some(v) = s.value {
                assert!(v + 1e-12 >= s.bound);
            }
        }
    }
}

#[test]
fn perturbed_decisions_within_eps0() {
    for seed in 0..6 {
        let fam = DriftingFamily::decaying(7, 0.01, 0.002, true, seed);
        let rep = replay_family(&fam, params(2, 1e-3), seed).unwrap();
        assert!(rep.steps.iter().all(|s| s.approximate && s.monotone));
        assert!(rep.trajectory_holds, "seed {seed}");
        assert!(rep.implication_failures.is_empty());
    }
}

#[test]
fn planted_collapse_found_at_its_step() {
    for step in 2..=6 {
        let fam = DriftingFamily::decaying(7, 0.01, 0.002, false, 4)
            .with_planted(PlantedViolation::Collapse { step, factor: 0.5 });
        let rep = replay_family(&fam, params(2, 0.0), 4).unwrap();
        let (at, name) = rep.first_violation.clone().unwrap();
        assert_eq!((at, name.as_str()), (step, "dynamic1"));
        let s = &rep.steps[step - 1];
        assert!(!s.dynamic2 && !s.dynamic2_backward);
        assert!(rep.steps[..step - 1].iter().all(|s| s.premises_hold()));
        assert!(rep.implication_failures.is_empty());
    }
}

#[test]
fn planted_non_monotone_found_at_its_step() {
    for step in 1..=7 {
        let fam = DriftingFamily::decaying(7, 0.01, 0.002, true, 9)
            .with_planted(PlantedViolation::NonMonotone { step });
        let rep = replay_family(&fam, params(2, 0.0), 9).unwrap();
        assert_eq!(rep.first_violation.as_ref().map(|v| v.0), Some(step));
        assert!(!rep.steps[step - 1].monotone);
        assert!(rep.steps.iter().filter(|s| !s.monotone).count() == 1);
    }
}

#[test]
fn bound_formula() {
    let p = DynamicParams { k: 2, theta: 0.1, gamma: 0.2, eps0: 0.05 };
    let b = trajectory_bound(&p, 3, 2.0);
    let expect = GREEDY_FACTOR * 0.9f64.powi(3) * 0.8f64.powi(3) * 2.0 - 0.15;
    assert!((b - expect).abs() < 1e-15);
}

#[test]
fn greedy_sequence_respects_budget_and_swaps() {
    let fam = DriftingFamily::decaying(9, 0.01, 0.002, true, 2);
    let sets = greedy_eviction_sequence(&fam, 9, 3);
    assert_eq!(sets.len(), 9);
    for (idx, s) in sets.iter().enumerate() {
        assert!(s.len() <= 3);
        assert!(s.iter().all(|&t| t >= 1 && t <= idx));
    }
    // token 1 dominates and is never dropped
    assert!(sets[1..].iter().all(|s| s.contains(&1)));
    let rep = check_dynamic_conditions(&fam, None::<&DriftingFamily>, &sets, params(3, 0.0)).unwrap();
    assert!(rep.all_conditions_hold());
    assert!(fam.eval(&[], 1, &[1]) > 0.0);
}
