//! Step-indexed set-function families `f_{Z,i}(Y)` and a checker that
//! verifies, step by step, the conditions under which greedy one-swap cache
//! maintenance keeps `f_{S_{i-1},i-1}(S_i)` within
//! `(1-1/e)(1-θ)^i(1-γ)^i opt_i - i·ε0`.
//!
//! Token indices are 1-based; `sets[0]` is `S_1 = ∅`, and `sets[i-1]` is
//! `S_i ⊆ [i-1]`.

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::submodular::{SubmodularError, GREEDY_FACTOR};

const TOL: f64 = 1e-12;

pub trait DynamicFamily {
    /// `f_{Z,i}(Y)`.
    fn eval(&self, z: &[usize], i: usize, y: &[usize]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DynamicParams {
    pub k: usize,
    pub theta: f64,
    pub gamma: f64,
    pub eps0: f64,
}

/// `opt_i = max f_{X,i}(Y)` over `X ⊆ [i-1]`, `Y ⊆ [i]`, `|X|,|Y| <= k`,
/// `|Y \ X| <= 1`.
pub fn opt_value<F: DynamicFamily + ?Sized>(family: &F, i: usize, k: usize) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let prev: Vec<usize> = (1..i).collect();
    let mut y = Vec::with_capacity(k + 1);
    for size in 0..=k.min(prev.len()) {
        for x in prev.iter().copied().combinations(size) {
            for inner in 0..=x.len().min(k) {
                for kept in x.iter().copied().combinations(inner) {
                    best = best.max(family.eval(&x, i, &kept));
                    if kept.len() < k {
                        for extra in (1..=i).filter(|e| !x.contains(e)) {
                            y.clear();
                            y.extend_from_slice(&kept);
                            y.push(extra);
                            best = best.max(family.eval(&x, i, &y));
                        }
                    }
                }
            }
        }
    }
    best
}

/// Builds `S_1..S_n` by the one-swap rule: below budget the newest token
/// is added; at budget the `v ∈ S_i ∪ {i}` maximizing
/// `f_{S_i,i}(S_i ∪ {i} \ {v})` is dropped (lowest index on ties).
pub fn greedy_eviction_sequence<F: DynamicFamily + ?Sized>(family: &F, n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut sets = Vec::with_capacity(n);
    sets.push(Vec::new());
    for i in 1..n {
        let cur: &Vec<usize> = sets.last().unwrap();
        let mut cand = cur.clone();
        cand.push(i);
        let next = if cur.len() < k {
            cand
        } else {
            let mut best: Option<(usize, f64)> = None;
            for &v in &cand {
                let without: Vec<usize> = cand.iter().copied().filter(|&t| t != v).collect();
                let val = family.eval(cur, i, &without);
                if best.is_none_or(|(_, b)| val > b) {
                    best = Some((v, val));
                }
            }
            let u = best.unwrap().0;
            cand.into_iter().filter(|&t| t != u).collect()
        };
        sets.push(next);
    }
    sets
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepConditions {
    pub step: usize,
    /// `f_{S_i,i}` non-decreasing on subsets of `[i]`.
    pub monotone: bool,
    /// `f_{S_i,i}(S_i) >= (1-θ) f_{S_{i-1},i-1}(S_i)`.
    pub dynamic1: bool,
    /// `opt_i >= (1-γ) opt_{i+1}`, the direction the induction step consumes.
    /// Vacuous at the last step, where `opt_{i+1}` is not defined.
    pub dynamic2: bool,
    /// `opt_i >= (1-γ) opt_{i-1}`, the stand-alone definition.
    pub dynamic2_backward: bool,
    /// `f_{S_i,i}(X) >= f̃_{S_i,i}(X) - ε0` for all `X ⊆ [i]`.
    pub approximate: bool,
    pub opt: f64,
    /// `f_{S_{i-1},i-1}(S_i)`; absent at step 1.
    pub value: Option<f64>,
    pub bound: f64,
    pub value_holds: Option<bool>,
}

impl StepConditions {
    pub fn premises_hold(&self) -> bool {
        self.monotone && self.dynamic1 && self.dynamic2 && self.approximate
    }

    fn first_failed(&self) -> Option<&'static str> {
        [
            (self.monotone, "monotone"),
            (self.dynamic1, "dynamic1"),
            (self.dynamic2, "dynamic2"),
            (self.approximate, "approximate"),
        ]
        .into_iter()
        .find(|(ok, _)| !ok)
        .map(|(_, name)| name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DynamicConditionReport {
    pub params: DynamicParams,
    pub steps: Vec<StepConditions>,
    /// First step whose premises fail, with the name of the failing condition.
    pub first_violation: Option<(usize, String)>,
    /// Every checked step satisfies the value bound.
    pub trajectory_holds: bool,
    /// Steps `i` whose premises and value bound held while step `i+1`'s
    /// value bound failed. Non-empty would contradict the induction step.
    pub implication_failures: Vec<usize>,
}

impl DynamicConditionReport {
    pub fn all_conditions_hold(&self) -> bool {
        self.first_violation.is_none()
    }
}

fn subsets(universe: &[usize]) -> impl Iterator<Item = Vec<usize>> + '_ {
    (0..=universe.len()).flat_map(move |s| universe.iter().copied().combinations(s))
}

fn is_monotone<F: DynamicFamily + ?Sized>(family: &F, z: &[usize], i: usize) -> bool {
    let universe: Vec<usize> = (1..=i).collect();
    let ok = subsets(&universe).all(|x| {
        let fx = family.eval(z, i, &x);
        universe.iter().filter(|e| !x.contains(e)).all(|&e| {
            let mut bigger = x.clone();
            bigger.push(e);
            family.eval(z, i, &bigger) + TOL >= fx
        })
    });
    ok
}

/// Trajectory lower bound `(1-1/e)(1-θ)^i(1-γ)^i opt_i - i ε0`.
pub fn trajectory_bound(params: &DynamicParams, i: usize, opt: f64) -> f64 {
    let p = i as i32;
    GREEDY_FACTOR * (1.0 - params.theta).powi(p) * (1.0 - params.gamma).powi(p) * opt - i as f64 * params.eps0
}

/// Checks every step of `sets` (`S_1, S_2, ...`). `approx` is the family the
/// cache decisions were made with; `None` means decisions used `exact`.
pub fn check_dynamic_conditions<F, G>(
    exact: &F,
    approx: Option<&G>,
    sets: &[Vec<usize>],
    params: DynamicParams,
) -> Result<DynamicConditionReport, SubmodularError>
where
    F: DynamicFamily + ?Sized,
    G: DynamicFamily + ?Sized,
{
    for (idx, s) in sets.iter().enumerate() {
        let i = idx + 1;
        if s.len() > params.k {
            return Err(SubmodularError::InvalidFamily(format!(
                "S_{i} has {} elements, budget {}",
                s.len(),
                params.k
            )));
        }
        if s.iter().any(|&t| t == 0 || t >= i) {
            return Err(SubmodularError::InvalidFamily(format!("S_{i} is not a subset of [{}]", i - 1)));
        }
        if idx > 0 && s.iter().filter(|t| !sets[idx - 1].contains(t)).count() > 1 {
            return Err(SubmodularError::SequenceViolation(i));
        }
    }
    let m = sets.len();
    let decide = |z: &[usize], i: usize, y: &[usize]| match approx {
        Some(g) => g.eval(z, i, y),
        None => exact.eval(z, i, y),
    };
    let opts: Vec<f64> = (1..=m).map(|i| opt_value(exact, i, params.k)).collect();

    let mut steps = Vec::with_capacity(m);
    for i in 1..=m {
        let s_i = &sets[i - 1];
        let monotone = match approx {
            Some(g) => is_monotone(g, s_i, i),
            None => is_monotone(exact, s_i, i),
        };
        let dynamic1 = if i == 1 {
            true
        } else {
            let s_prev = &sets[i - 2];
            decide(s_i, i, s_i) + TOL >= (1.0 - params.theta) * decide(s_prev, i - 1, s_i)
        };
        let opt = opts[i - 1];
        let dynamic2 = i == m || opt + TOL >= (1.0 - params.gamma) * opts[i];
        let dynamic2_backward = i == 1 || opt + TOL >= (1.0 - params.gamma) * opts[i - 2];
        let approximate = match approx {
            None => true,
            Some(g) => {
                let universe: Vec<usize> = (1..=i).collect();
                let ok = subsets(&universe).all(|x| exact.eval(s_i, i, &x) + TOL >= g.eval(s_i, i, &x) - params.eps0);
                ok
            }
        };
        let bound = trajectory_bound(&params, i, opt);
        let value = (i >= 2).then(|| exact.eval(&sets[i - 2], i - 1, s_i));
        steps.push(StepConditions {
            step: i,
            monotone,
            dynamic1,
            dynamic2,
            dynamic2_backward,
            approximate,
            opt,
            value,
            bound,
            value_holds: value.map(|v| v + TOL >= bound),
        });
    }

    let first_violation = steps
        .iter()
        .find_map(|s| s.first_failed().map(|name| (s.step, name.to_string())));
    let trajectory_holds = steps.iter().all(|s| s.value_holds != Some(false));
    let implication_failures = steps
        .windows(2)
        .filter(|w| w[0].premises_hold() && w[0].value_holds == Some(true) && w[1].value_holds == Some(false))
        .map(|w| w[0].step)
        .collect();
    Ok(DynamicConditionReport {
        params,
        steps,
        first_violation,
        trajectory_holds,
        implication_failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantedViolation {
    /// Scale `f_{·,step}` by `factor < 1`, breaking the drift conditions at `step`.
    Collapse { step: usize, factor: f64 },
    /// Make `f_{·,step}` decreasing in the set size.
    NonMonotone { step: usize },
}

impl PlantedViolation {
    pub fn step(&self) -> usize {
        match *self {
            PlantedViolation::Collapse { step, .. } | PlantedViolation::NonMonotone { step } => step,
        }
    }
}

/// `f_{Z,i}(Y) = (1 - drift)^i · φ(sum_{j ∈ Y} w_j)` with `φ` either the
/// identity or `sqrt(1+z) - 1`. Token 1 carries unit weight and later tokens
/// carry small weights, so `opt_i` grows slowly and the drift alone governs
/// `θ` and `γ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftingFamily {
    pub weights: Vec<f64>,
    pub drift: f64,
    pub concave: bool,
    pub planted: Option<PlantedViolation>,
}

impl DriftingFamily {
    pub fn new(weights: Vec<f64>, drift: f64, concave: bool) -> Self {
        Self {
            weights,
            drift,
            concave,
            planted: None,
        }
    }

    /// `n` tokens: `w_1 = 1`, `w_j ~ U(0.5, 1) · tail` for `j >= 2`.
    pub fn decaying(n: usize, drift: f64, tail: f64, concave: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (1..=n)
            .map(|j| if j == 1 { 1.0 } else { tail * rng.random_range(0.5..1.0) })
            .collect();
        Self::new(weights, drift, concave)
    }

    pub fn with_planted(mut self, planted: PlantedViolation) -> Self {
        self.planted = Some(planted);
        self
    }

    fn shape(&self, z: f64) -> f64 {
        if self.concave {
            (1.0 + z).sqrt() - 1.0
        } else {
            z
        }
    }
}

impl DynamicFamily for DriftingFamily {
    fn eval(&self, _z: &[usize], i: usize, y: &[usize]) -> f64 {
        let mass: f64 = y.iter().map(|&j| self.weights[j - 1]).sum();
        let base = (1.0 - self.drift).powi(i as i32) * self.shape(mass);
        match self.planted {
            Some(PlantedViolation::Collapse { step, factor }) if step == i => factor * base,
            Some(PlantedViolation::NonMonotone { step }) if step == i => -(y.len() as f64),
            _ => base,
        }
    }
}

/// `f̃ = f + ε0 · (sum_{j ∈ Y} r_j) / (sum_j r_j)` with seeded positive `r`,
/// so `f <= f̃ <= f + ε0` and monotonicity is preserved.
#[derive(Debug, Clone)]
pub struct PerturbedFamily<'a, F: DynamicFamily + ?Sized> {
    pub exact: &'a F,
    pub eps0: f64,
    r: Vec<f64>,
}

impl<'a, F: DynamicFamily + ?Sized> PerturbedFamily<'a, F> {
    pub fn new(exact: &'a F, n: usize, eps0: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        Self {
            exact,
            eps0,
            r: raw.into_iter().map(|v| v / total).collect(),
        }
    }
}

impl<F: DynamicFamily + ?Sized> DynamicFamily for PerturbedFamily<'_, F> {
    fn eval(&self, z: &[usize], i: usize, y: &[usize]) -> f64 {
        let bump: f64 = y.iter().map(|&j| self.r[j - 1]).sum();
        self.exact.eval(z, i, y) + self.eps0 * bump
    }
}

/// Greedy replay plus condition check for one drifting family.
pub fn replay_family(
    family: &DriftingFamily,
    params: DynamicParams,
    seed: u64,
) -> Result<DynamicConditionReport, SubmodularError> {
    let n = family.weights.len();
    if params.eps0 > 0.0 {
        let approx = PerturbedFamily::new(family, n, params.eps0, seed);
        let sets = greedy_eviction_sequence(&approx, n, params.k);
        check_dynamic_conditions(family, Some(&approx), &sets, params)
    } else {
        let sets = greedy_eviction_sequence(family, n, params.k);
        check_dynamic_conditions(family, None::<&DriftingFamily>, &sets, params)
    }
}
