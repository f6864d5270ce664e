use kve_core::regression::{
    check_hessian_lipschitz, exp_mass, gradient, hessian, min_eigenvalue, newton_solve, RegressionProblem,
    WeightFloor,
};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn shape(seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let d = rng.random_range(1..=6);
    (rng.random_range(d..=12), d)
}

fn point(d: usize, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.random_range(-scale..scale))
}

#[test]
fn strong_floor_gives_curvature_l() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..50 {
        let (n, d) = shape(seed);
        let l = rng.random_range(0.1..5.0);
        let p = RegressionProblem::random(n, d, 1.0, l, seed, WeightFloor::Strong);
        assert!(p.pd_condition_holds());
        for _ in 0..5 {
            let x = point(d, 2.0, &mut rng);
            let m = min_eigenvalue(&hessian(&p, &x).unwrap());
            assert!(m >= l * (1.0 - 1e-6), "seed {seed}: {m} < {l}");
        }
    }
}

#[test]
fn weak_floor_still_gives_curvature_l() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..50 {
        let (n, d) = shape(seed);
        let l = rng.random_range(0.1..5.0);
        let p = RegressionProblem::random(n, d, 1.0, l, seed, WeightFloor::Weak);
        for _ in 0..5 {
            let x = point(d, 1.0, &mut rng);
            let m = min_eigenvalue(&hessian(&p, &x).unwrap());
            assert!(m >= l * (1.0 - 1e-6), "seed {seed}: {m} < {l}");
        }
    }
}

#[test]
fn hessian_lipschitz_ratio_within_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..100 {
        let (n, d) = shape(seed);
        let r = rng.random_range(0.2..1.0);
        let p = RegressionProblem::random(n, d, r, 1.0, seed, WeightFloor::Weak);
        let x = point(d, r, &mut rng);
        let y = point(d, r, &mut rng);
        let c = check_hessian_lipschitz(&p, &x, &y).unwrap();
        assert!(c.holds && c.ratio <= c.bound, "seed {seed}");
        let near = &x + DVector::from_element(d, 1e-7);
        let c2 = check_hessian_lipschitz(&p, &x, &near).unwrap();
        assert!(c2.ratio < 1e-3 * c2.bound);
        assert_eq!(check_hessian_lipschitz(&p, &x, &x).unwrap().ratio, 0.0);
    }
}

#[test]
fn newton_converges_in_pd_regime() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..50 {
        let (n, d) = shape(seed);
        let p = RegressionProblem::random(n, d, 1.0, 1.0, seed, WeightFloor::Strong);
        let x0 = point(d, 1.0, &mut rng);
        let t = newton_solve(&p, &x0, 1e-10, 30).unwrap();
        assert!(t.converged && t.iterations() <= 30);
        assert!(t.last().grad_norm <= 1e-10);
        assert!(t.grad_norm_strictly_decreasing(), "seed {seed}");
        assert!(t.states.iter().all(|s| !s.damped));
        assert!(gradient(&p, &t.solution()).unwrap().norm() <= 1e-10);
    }
}

#[test]
fn newton_tail_is_quadratic() {
    let mut checked = 0;
    for seed in 0..20 {
        let (n, d) = shape(seed);
        let p = RegressionProblem::random(n, d, 1.0, 1.0, seed, WeightFloor::Weak);
        let x0 = DVector::from_element(d, 1.0);
        let t = newton_solve(&p, &x0, 1e-13, 40).unwrap();
        // g_{k+1} <= C g_k^2 once g_k is small; skip steps near roundoff
        for w in t.states.windows(2) {
            let (a, b) = (w[0].grad_norm, w[1].grad_norm);
            if a < 1e-2 && b > 1e-12 {
                assert!(b <= 10.0 * a * a, "seed {seed}: {a:e} -> {b:e}");
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn minimizer_independent_of_start() {
    for seed in 0..20 {
        let (n, d) = shape(seed);
        let p = RegressionProblem::random(n, d, 1.0, 1.0, seed, WeightFloor::Strong);
        let a = newton_solve(&p, &DVector::zeros(d), 1e-12, 30).unwrap().solution();
        let b = newton_solve(&p, &DVector::from_element(d, 0.8), 1e-12, 30).unwrap().solution();
        assert!((a - b).amax() <= 1e-8, "seed {seed}");
    }
}

#[test]
fn exp_mass_falls_as_sparse_weight_grows() {
    for seed in 0..10 {
        let (n, d) = shape(seed);
        let base = RegressionProblem::random(n, d, 1.0, 1.0, seed, WeightFloor::Weak);
        let mut prev = f64::INFINITY;
        for lambda in [0.0, 0.5, 1.0, 2.0, 5.0, 10.0] {
            let p = base.clone().with_sparse_weight(lambda);
            let x = newton_solve(&p, &DVector::zeros(d), 1e-12, 50).unwrap().solution();
            let alpha = exp_mass(&p, &x).unwrap();
            assert!(alpha <= prev + 1e-12, "seed {seed} lambda {lambda}");
            prev = alpha;
        }
    }
}
