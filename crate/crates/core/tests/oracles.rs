//! Library results against independent reference implementations.

use std::collections::HashMap;

use kve_core::attention::{exact_step, masked_step};
use kve_core::metrics::{
    check_good_distribution, full_accumulated_scores, heavy_hitter_profile, lift_profile, retained_mass,
};
use kve_core::policy::{run_policy, PolicyConfig, PolicyKind};
use kve_core::regression::{gradient_terms, hessian_terms, loss, RegressionProblem, WeightFloor};
use kve_core::submodular::{brute_force_opt, InstanceKind, SetFunction, SubmodularInstance};
use kve_core::trace::{generate_trace, AttentionTrace, SyntheticTraceSpec, TraceKind};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive_softmax(trace: &AttentionTrace, i: usize, set: &[usize]) -> Vec<(usize, f64)> {
    let raw: Vec<f64> = set.iter().map(|&j| trace.logit(i, j).exp()).collect();
    let z: f64 = raw.iter().sum();
    set.iter().zip(raw).map(|(&j, e)| (j, e / z)).collect()
}

#[test]
fn exact_and_masked_match_unshifted_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..10 {
        let kind = [TraceKind::UniformGaussian, TraceKind::PowerLawKeys, TraceKind::SinkDominant][seed as usize % 3];
        let t = generate_trace(&SyntheticTraceSpec::new(30, 6, kind, seed)).unwrap();
        for i in 1..=t.n() {
            let all: Vec<usize> = (1..=i).collect();
            let ex = exact_step(&t, i).unwrap();
            for ((j, w), (rj, rw)) in ex.weights.iter().zip(naive_softmax(&t, i, &all)) {
                assert_eq!(*j, rj);
                assert!((w - rw).abs() < 1e-12);
            }
            let mut set: Vec<usize> = (1..i).filter(|_| rng.random_bool(0.4)).collect();
            set.push(i);
            let m = masked_step(&t, i, &set).unwrap();
            for ((j, w), (rj, rw)) in m.weights.iter().zip(naive_softmax(&t, i, &set)) {
                assert_eq!(*j, rj);
                assert!((w - rw).abs() < 1e-12);
            }
        }
    }
}

/// List-based replay of the score and recency policies, sharing nothing with
/// the library's cache or queue.
fn reference_sets(trace: &AttentionTrace, cfg: &PolicyConfig) -> Vec<Vec<usize>> {
    let k = cfg.budget;
    let window = ((cfg.recent_frac * k as f64).floor()) as usize;
    let mut admitted: Vec<usize> = Vec::new(); // tracked tokens, admission order
    let mut scores: HashMap<usize, f64> = HashMap::new();
    let mut out = Vec::new();
    for i in 1..=trace.n() {
        let mut cand: Vec<usize> = admitted.clone();
        cand.push(i);
        cand.sort_unstable();
        let weights = naive_softmax(trace, i, &cand);
        for &(j, w) in &weights {
            *scores.entry(j).or_insert(0.0) += w;
        }
        if admitted.len() < k {
            admitted.push(i);
        } else {
            let lowest = |pool: Vec<usize>, key: &dyn Fn(usize) -> f64| -> usize {
                let mut best = pool[0];
                for &t in &pool[1..] {
                    if key(t) < key(best) {
                        best = t;
                    }
                }
                best
            };
            let victim = match cfg.kind {
                PolicyKind::Local => cand[0],
                PolicyKind::SinkLocal => cand.iter().copied().find(|&t| t > cfg.sink).unwrap_or(i),
                PolicyKind::H2Only => lowest(cand.clone(), &|t| scores[&t]),
                PolicyKind::H2o => {
                    let recent: Vec<usize> = admitted[admitted.len().saturating_sub(window)..].to_vec();
                    let pool: Vec<usize> = cand
                        .iter()
                        .copied()
                        .filter(|t| !recent.contains(t) && !(window > 0 && *t == i))
                        .collect();
                    lowest(pool, &|t| scores[&t])
                }
                PolicyKind::Topk => {
                    let w: HashMap<usize, f64> = weights.iter().copied().collect();
                    lowest(cand.clone(), &|t| w[&t])
                }
                other => panic!("no reference for {other}"),
            };
            scores.remove(&victim);
            admitted.retain(|&t| t != victim);
            if victim != i {
                admitted.push(i);
            }
        }
        let mut s = admitted.clone();
        s.sort_unstable();
        out.push(s);
    }
    out
}

#[test]
fn simulation_matches_list_reference() {
    let kinds = [
        PolicyKind::Local,
        PolicyKind::SinkLocal,
        PolicyKind::H2o,
        PolicyKind::H2Only,
        PolicyKind::Topk,
    ];
    for seed in 0..12 {
        let tk = [TraceKind::PowerLawKeys, TraceKind::MidHeavy, TraceKind::UniformGaussian][seed as usize % 3];
        let t = generate_trace(&SyntheticTraceSpec::new(90, 8, tk, seed)).unwrap();
        for kind in kinds {
            for (budget, frac) in [(12, 0.5), (7, 0.3), (20, 0.0)] {
                let cfg = PolicyConfig::new(kind, budget).with_recent_frac(frac).with_sink(3);
                let sim = run_policy(&t, &cfg).unwrap();
                let reference = reference_sets(&t, &cfg);
                for (step, expect) in sim.steps.iter().zip(&reference) {
                    assert_eq!(&step.cached, expect, "{kind} k={budget} step {}", step.step);
                }
                let rep = retained_mass(&t, &sim).unwrap();
                for (i, s) in rep.steps.iter().enumerate() {
                    let step = i + 1;
                    let mut attended = if step == 1 { vec![] } else { reference[step - 2].clone() };
                    attended.push(step);
                    let all: Vec<usize> = (1..=step).collect();
                    let exact: HashMap<usize, f64> = naive_softmax(&t, step, &all).into_iter().collect();
                    let r: f64 = attended.iter().map(|j| exact[j]).sum();
                    assert!((s.retained_mass - r).abs() < 1e-12);
                    assert!((s.tv - (1.0 - r)).abs() < 1e-12);
                }
            }
        }
    }
}

fn harmonic(n: usize) -> f64 {
    (1..=n).map(|i| 1.0 / i as f64).sum()
}

#[test]
fn uniform_accumulation_closed_form() {
    // zero queries give exactly uniform rows: token j collects H_n - H_{j-1}
    let n = 200;
    let t = AttentionTrace::new(n, 2, vec![0.0; 2 * n], vec![1.0; 2 * n]).unwrap();
    let acc = full_accumulated_scores(&t);
    for (j, a) in acc.iter().enumerate() {
        assert!((a - (harmonic(n) - harmonic(j))).abs() < 1e-10);
    }
    let m = n / 10;
    let top: f64 = (0..m).map(|j| harmonic(n) - harmonic(j)).sum();
    let p = heavy_hitter_profile(&acc);
    assert!((p.top10 - top / n as f64).abs() < 1e-12);
    assert!((p.top10 - 0.33).abs() < 0.01);
    assert!((lift_profile(&t).top10 - 0.1).abs() < 1e-12);
}

/// Every size-`k` subset by include/exclude recursion.
fn recursive_opt(f: &SubmodularInstance, k: usize) -> f64 {
    fn go(f: &SubmodularInstance, next: usize, k: usize, cur: &mut Vec<usize>, best: &mut f64) {
        if cur.len() == k {
            *best = best.max(f.eval(cur));
            return;
        }
        if next == f.ground_size() || f.ground_size() - next < k - cur.len() {
            return;
        }
        cur.push(next);
        go(f, next + 1, k, cur, best);
        cur.pop();
        go(f, next + 1, k, cur, best);
    }
    let mut best = f64::NEG_INFINITY;
    go(f, 0, k, &mut Vec::new(), &mut best);
    best
}

#[test]
fn brute_force_matches_recursive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for round in 0..60 {
        let kind = InstanceKind::ALL[round % 3];
        let n = rng.random_range(3..=10);
        let k = rng.random_range(1..=n.min(4));
        let f = SubmodularInstance::random(kind, n, &mut rng);
        let bf = brute_force_opt(&f, k).unwrap();
        assert!((bf.value - recursive_opt(&f, k)).abs() < 1e-12);
        assert!((f.eval(&bf.set) - bf.value).abs() < 1e-12);
    }
    let f = SubmodularInstance::random(InstanceKind::Coverage, 10, &mut rng);
    assert_eq!(brute_force_opt(&f, 3).unwrap().value, recursive_opt(&f, 3));
}

#[test]
fn good_distribution_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let m = rng.random_range(1..=20);
        let count = rng.random_range(1..=20);
        let tau = 0.3;
        let samples: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..m).map(|_| if rng.random_bool(0.3) { rng.random::<f64>() } else { 0.0 }).collect())
            .collect();
        let core: Vec<usize> = (0..m).filter(|_| rng.random_bool(0.15)).collect();
        let alpha = rng.random_range(0.0..2.0);
        let c = check_good_distribution(&samples, &core, tau, alpha).unwrap();

        let mut good = true;
        let mut in_union = vec![false; m];
        let mut in_all = vec![true; m];
        for s in &samples {
            let mut excess = 0;
            for e in 0..m {
                let supp = s[e] >= tau;
                in_union[e] |= supp;
                in_all[e] &= supp;
                if core.contains(&e) && !supp {
                    good = false;
                }
                if supp && !core.contains(&e) {
                    excess += 1;
                }
            }
            if excess as f64 > alpha * core.len() as f64 {
                good = false;
            }
        }
        let union_excess = (0..m).filter(|e| in_union[*e] && !core.contains(e)).count();
        assert_eq!(c.good, good);
        assert_eq!(c.union_excess, union_excess);
        assert_eq!(c.core_in_intersection, core.iter().all(|&e| in_all[e]));
        if c.good {
            assert!(c.core_in_intersection && c.union_bound_ok);
        }
    }
}

fn direct_loss(p: &RegressionProblem, x: &DVector<f64>) -> (f64, f64, f64) {
    let n = p.n();
    let mut ax = vec![0.0; n];
    for r in 0..n {
        for c in 0..p.d() {
            ax[r] += p.a[(r, c)] * x[c];
        }
    }
    let u: Vec<f64> = ax.iter().map(|v| v.exp()).collect();
    let alpha: f64 = u.iter().sum();
    let l_exp: f64 = (0..n).map(|r| (u[r] / alpha - p.b[r]).powi(2)).sum::<f64>() * 0.5;
    let l_reg: f64 = (0..n).map(|r| (p.w[r] * ax[r]).powi(2)).sum::<f64>() * 0.5;
    (l_exp, alpha, l_reg)
}

fn random_point(rng: &mut ChaCha8Rng, d: usize, radius: f64) -> DVector<f64> {
    let v: DVector<f64> = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let norm = v.norm().max(1e-12);
    v * (radius * rng.random_range(0.1..1.0) / norm)
}

#[test]
fn loss_matches_direct_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..20 {
        let p = RegressionProblem::random(5, 3, 1.0, 1.0, seed, WeightFloor::Fixed(2.0));
        let x = random_point(&mut rng, 3, 1.0);
        let l = loss(&p, &x).unwrap();
        let (e, s, r) = direct_loss(&p, &x);
        assert!((l.exp - e).abs() < 1e-14);
        assert!((l.sparse - s).abs() < 1e-12 * s);
        assert!((l.reg - r).abs() < 1e-12 * r.max(1.0));
        assert!((l.total - (e + s + r)).abs() < 1e-11);
    }
}

fn rel(a: f64, b: f64) -> f64 {
    a / b.max(1e-8)
}

#[test]
fn gradient_terms_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-5;
    for seed in 0..30 {
        let n = rng.random_range(2..=12);
        let d = rng.random_range(1..=6.min(n));
        let p = RegressionProblem::random(n, d, 1.5, 1.0, seed, WeightFloor::Fixed(1.0));
        let x = random_point(&mut rng, d, 1.5);
        let g = gradient_terms(&p, &x).unwrap();
        let mut fd = [DVector::zeros(d), DVector::zeros(d), DVector::zeros(d)];
        for c in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let (lp, lm) = (loss(&p, &xp).unwrap(), loss(&p, &xm).unwrap());
            fd[0][c] = (lp.exp - lm.exp) / (2.0 * h);
            fd[1][c] = (lp.sparse - lm.sparse) / (2.0 * h);
            fd[2][c] = (lp.reg - lm.reg) / (2.0 * h);
        }
        for (name, analytic, approx) in [("exp", &g.exp, &fd[0]), ("sparse", &g.sparse, &fd[1]), ("reg", &g.reg, &fd[2])] {
            let err = rel((analytic - approx).norm(), analytic.norm());
            assert!(err <= 1e-5 || (analytic - approx).norm() < 1e-9, "{name} term: {err:e}");
        }
    }
}

#[test]
fn hessian_terms_match_gradient_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let h = 1e-5;
    for seed in 0..30 {
        let n = rng.random_range(2..=12);
        let d = rng.random_range(1..=6.min(n));
        let p = RegressionProblem::random(n, d, 1.5, 1.0, 100 + seed, WeightFloor::Fixed(1.0));
        let x = random_point(&mut rng, d, 1.5);
        let hs = hessian_terms(&p, &x).unwrap();
        let mut fd = [DMatrix::zeros(d, d), DMatrix::zeros(d, d), DMatrix::zeros(d, d)];
        for c in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let (gp, gm) = (gradient_terms(&p, &xp).unwrap(), gradient_terms(&p, &xm).unwrap());
            fd[0].set_column(c, &((gp.exp - gm.exp) / (2.0 * h)));
            fd[1].set_column(c, &((gp.sparse - gm.sparse) / (2.0 * h)));
            fd[2].set_column(c, &((gp.reg - gm.reg) / (2.0 * h)));
        }
        for (name, analytic, approx) in [("exp", &hs.exp, &fd[0]), ("sparse", &hs.sparse, &fd[1]), ("reg", &hs.reg, &fd[2])] {
            let diff = (analytic - approx).norm();
            let err = rel(diff, analytic.norm());
            assert!(err <= 1e-4 || diff < 1e-8, "{name} term: {err:e}");
            assert!((analytic - analytic.transpose()).amax() <= 1e-12 * analytic.amax().max(1.0));
        }
    }
}
