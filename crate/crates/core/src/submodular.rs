//! Monotone submodular set functions and the solvers used to check the
//! greedy guarantees against exhaustive search.
//!
//! Ground-set elements are `0..n`. Sets are passed as slices of distinct
//! elements; order does not matter to [`SetFunction::eval`].

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{AccumulatedScores, ScoreFunction};

/// `1 - 1/e`.
pub const GREEDY_FACTOR: f64 = 1.0 - 1.0 / std::f64::consts::E;
/// Largest ground set [`brute_force_opt`] will enumerate.
pub const BRUTE_FORCE_MAX_N: usize = 22;

#[derive(Debug, Error, PartialEq)]
pub enum SubmodularError {
    #[error("budget {k} outside 1..={n}")]
    BadBudget { k: usize, n: usize },
    #[error("ground set of {0} elements is too large to enumerate (max {BRUTE_FORCE_MAX_N})")]
    TooLarge(usize),
    #[error("set sequence violates |S_i \\ S_(i-1)| <= 1 at step {0}")]
    SequenceViolation(usize),
    #[error("invalid family: {0}")]
    InvalidFamily(String),
}

pub trait SetFunction {
    fn ground_size(&self) -> usize;
    fn eval(&self, set: &[usize]) -> f64;

    /// `f(S ∪ {x}) - f(S)`.
    fn marginal(&self, set: &[usize], x: usize) -> f64 {
        let mut with = set.to_vec();
        with.push(x);
        self.eval(&with) - self.eval(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubmodularInstance {
    /// `f(S) = sum_{i in S} w_i`, `w >= 0`.
    Modular { weights: Vec<f64> },
    /// `f(S) = min(B, sum_{i in S} w_i)`.
    BudgetAdditive { weights: Vec<f64>, budget: f64 },
    /// `f(S) = |∪_{i in S} E_i|`.
    Coverage { sets: Vec<Vec<usize>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceKind {
    Modular,
    BudgetAdditive,
    Coverage,
}

impl InstanceKind {
    pub const ALL: [InstanceKind; 3] = [
        InstanceKind::Coverage,
        InstanceKind::BudgetAdditive,
        InstanceKind::Modular,
    ];
}

impl SubmodularInstance {
    pub fn kind(&self) -> InstanceKind {
        match self {
            SubmodularInstance::Modular { .. } => InstanceKind::Modular,
            SubmodularInstance::BudgetAdditive { .. } => InstanceKind::BudgetAdditive,
            SubmodularInstance::Coverage { .. } => InstanceKind::Coverage,
        }
    }

    /// Random instance on `n` elements. Coverage sets are drawn from a
    /// universe of `2n` items, each item included with probability 0.3.
    pub fn random<R: Rng + ?Sized>(kind: InstanceKind, n: usize, rng: &mut R) -> Self {
        match kind {
            InstanceKind::Modular => SubmodularInstance::Modular {
                weights: (0..n).map(|_| rng.random::<f64>()).collect(),
            },
            InstanceKind::BudgetAdditive => {
                let weights: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let total: f64 = weights.iter().sum();
                let budget = total * rng.random_range(0.2..0.7);
                SubmodularInstance::BudgetAdditive { weights, budget }
            }
            InstanceKind::Coverage => {
                let universe = 2 * n.max(1);
                SubmodularInstance::Coverage {
                    sets: (0..n)
                        .map(|_| (0..universe).filter(|_| rng.random_bool(0.3)).collect())
                        .collect(),
                }
            }
        }
    }
}

impl SetFunction for SubmodularInstance {
    fn ground_size(&self) -> usize {
        match self {
            SubmodularInstance::Modular { weights } => weights.len(),
            SubmodularInstance::BudgetAdditive { weights, .. } => weights.len(),
            SubmodularInstance::Coverage { sets } => sets.len(),
        }
    }

    fn eval(&self, set: &[usize]) -> f64 {
        match self {
            SubmodularInstance::Modular { weights } => set.iter().map(|&i| weights[i]).sum(),
            SubmodularInstance::BudgetAdditive { weights, budget } => {
                budget.min(set.iter().map(|&i| weights[i]).sum())
            }
            SubmodularInstance::Coverage { sets } => {
                let mut covered: Vec<usize> = set.iter().flat_map(|&i| sets[i].iter().copied()).collect();
                covered.sort_unstable();
                covered.dedup();
                covered.len() as f64
            }
        }
    }
}

/// `F_score(T) = h(sum_{s in T} score_s) - h(0)` over a snapshot of cached
/// tokens. Element `e` stands for `tokens[e]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionScoreFunction {
    pub tokens: Vec<usize>,
    pub scores: Vec<f64>,
    pub h: ScoreFunction,
}

impl AttentionScoreFunction {
    pub fn new(tokens: Vec<usize>, scores: Vec<f64>, h: ScoreFunction) -> Self {
        assert_eq!(tokens.len(), scores.len());
        Self { tokens, scores, h }
    }

    /// Snapshot of every scored token.
    pub fn from_scores(scores: &AccumulatedScores, h: ScoreFunction) -> Self {
        let (tokens, values) = scores.iter().unzip();
        Self::new(tokens, values, h)
    }

    pub fn element_of(&self, token: usize) -> Option<usize> {
        self.tokens.iter().position(|&t| t == token)
    }

    pub fn tokens_of(&self, set: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = set.iter().map(|&e| self.tokens[e]).collect();
        out.sort_unstable();
        out
    }
}

impl SetFunction for AttentionScoreFunction {
    fn ground_size(&self) -> usize {
        self.tokens.len()
    }

    fn eval(&self, set: &[usize]) -> f64 {
        let z: f64 = set.iter().map(|&e| self.scores[e]).sum();
        self.h.apply(z) - self.h.apply(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    /// Elements in the order they were picked.
    pub order: Vec<usize>,
    /// Same elements, ascending.
    pub set: Vec<usize>,
    pub value: f64,
}

impl Selection {
    fn from_order(order: Vec<usize>, value: f64) -> Self {
        let mut set = order.clone();
        set.sort_unstable();
        Self { order, set, value }
    }
}

fn check_budget(k: usize, n: usize) -> Result<(), SubmodularError> {
    if k == 0 || k > n {
        return Err(SubmodularError::BadBudget { k, n });
    }
    Ok(())
}

/// Picks `k` elements, each maximizing `f(S ∪ {i})`; ties go to the lowest index.
pub fn greedy<F: SetFunction + ?Sized>(f: &F, k: usize) -> Result<Selection, SubmodularError> {
    let n = f.ground_size();
    check_budget(k, n)?;
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut current = Vec::with_capacity(k + 1);
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            current.clear();
            current.extend_from_slice(&chosen);
            current.push(i);
            let v = f.eval(&current);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        let (j, _) = best.expect("k <= n leaves a candidate");
        taken[j] = true;
        chosen.push(j);
    }
    let value = f.eval(&chosen);
    Ok(Selection::from_order(chosen, value))
}

/// Exact maximum over all size-`k` subsets; the lexicographically first
/// maximizer wins ties.
pub fn brute_force_opt<F: SetFunction + ?Sized>(f: &F, k: usize) -> Result<Selection, SubmodularError> {
    let n = f.ground_size();
    if n > BRUTE_FORCE_MAX_N {
        return Err(SubmodularError::TooLarge(n));
    }
    check_budget(k, n)?;
    let mut best: Option<(Vec<usize>, f64)> = None;
    for combo in (0..n).combinations(k) {
        let v = f.eval(&combo);
        if best.as_ref().is_none_or(|(_, b)| v > *b) {
            best = Some((combo, v));
        }
    }
    let (set, value) = best.expect("at least one subset");
    Ok(Selection::from_order(set, value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Uniform in `[-eps, eps]`.
    Uniform,
    /// Exactly `+eps` or `-eps`, by a seeded coin per query.
    Edges,
    /// `-eps` on the true best marginal, `+eps` everywhere else.
    AgainstBest,
}

/// Marginal-gain oracle with additive error at most `eps`. Answers are a
/// pure function of `(seed, S, i)`, so repeated queries agree.
#[derive(Debug, Clone)]
pub struct NoisyOracle<'a, F: SetFunction + ?Sized> {
    pub base: &'a F,
    pub eps: f64,
    pub seed: u64,
    pub mode: NoiseMode,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl<'a, F: SetFunction + ?Sized> NoisyOracle<'a, F> {
    pub fn new(base: &'a F, eps: f64, seed: u64, mode: NoiseMode) -> Self {
        Self { base, eps, seed, mode }
    }

    fn hash(&self, set: &[usize], i: usize) -> u64 {
        let mut sorted = set.to_vec();
        sorted.sort_unstable();
        let mut h = splitmix(self.seed);
        for e in sorted {
            h = splitmix(h ^ (e as u64 + 1));
        }
        splitmix(h ^ ((i as u64) << 32 | 0xABCD))
    }

    /// `O(S, i)`.
    pub fn query(&self, set: &[usize], i: usize) -> f64 {
        let delta = self.base.marginal(set, i);
        if self.eps == 0.0 {
            return delta;
        }
        let noise = match self.mode {
            NoiseMode::Uniform => {
                let u = (self.hash(set, i) >> 11) as f64 / (1u64 << 53) as f64;
                self.eps * (2.0 * u - 1.0)
            }
            NoiseMode::Edges => {
                if self.hash(set, i) & 1 == 0 {
                    self.eps
                } else {
                    -self.eps
                }
            }
            NoiseMode::AgainstBest => {
                let n = self.base.ground_size();
                let best = (0..n)
                    .filter(|e| !set.contains(e))
                    .map(|e| (e, self.base.marginal(set, e)))
                    .fold(None::<(usize, f64)>, |acc, (e, m)| match acc {
                        Some((_, bm)) if bm >= m => acc,
                        _ => Some((e, m)),
                    });
                if best.is_some_and(|(e, _)| e == i) {
                    -self.eps
                } else {
                    self.eps
                }
            }
        };
        delta + noise
    }
}

/// Greedy driven by the noisy oracle; the returned value is under the true `f`.
pub fn robust_greedy<F: SetFunction + ?Sized>(
    oracle: &NoisyOracle<'_, F>,
    k: usize,
) -> Result<Selection, SubmodularError> {
    let n = oracle.base.ground_size();
    check_budget(k, n)?;
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|i| !chosen.contains(i)) {
            let v = oracle.query(&chosen, i);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        chosen.push(best.expect("k <= n leaves a candidate").0);
    }
    let value = oracle.base.eval(&chosen);
    Ok(Selection::from_order(chosen, value))
}

/// `f(S_k) >= (1 - 1/e) opt - k (2 - 1/e) eps`.
pub fn robust_greedy_bound(opt: f64, k: usize, eps: f64) -> f64 {
    GREEDY_FACTOR * opt - k as f64 * (2.0 - 1.0 / std::f64::consts::E) * eps
}

fn mask_to_vec(mask: u64) -> Vec<usize> {
    (0..64).filter(|b| mask >> b & 1 == 1).collect()
}

/// Greedy and robust greedy against brute force on one random instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub instance: usize,
    pub kind: InstanceKind,
    pub n: usize,
    pub k: usize,
    pub eps: f64,
    pub opt: f64,
    pub greedy: f64,
    pub robust: f64,
    pub greedy_ok: bool,
    pub robust_ok: bool,
}

/// Instance `index` of a run seeded with `seed`: the kind cycles through
/// [`InstanceKind::ALL`], `n` is drawn from `2..=max_n` and `k` from
/// `1..=min(max_k, n)`. Depends only on `(seed, index)`.
pub fn check_random_instance(
    seed: u64,
    index: usize,
    max_n: usize,
    max_k: usize,
    eps: f64,
    mode: NoiseMode,
) -> Result<BoundCheck, SubmodularError> {
    if !(2..=BRUTE_FORCE_MAX_N).contains(&max_n) {
        return Err(SubmodularError::TooLarge(max_n));
    }
    if max_k == 0 {
        return Err(SubmodularError::BadBudget { k: 0, n: max_n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(index as u64)));
    let kind = InstanceKind::ALL[index % InstanceKind::ALL.len()];
    let n = rng.random_range(2..=max_n);
    let k = rng.random_range(1..=max_k.min(n));
    let f = SubmodularInstance::random(kind, n, &mut rng);
    let opt = brute_force_opt(&f, k)?.value;
    let g = greedy(&f, k)?.value;
    let r = robust_greedy(&NoisyOracle::new(&f, eps, rng.random(), mode), k)?.value;
    Ok(BoundCheck {
        instance: index,
        kind,
        n,
        k,
        eps,
        opt,
        greedy: g,
        robust: r,
        greedy_ok: g + 1e-12 >= GREEDY_FACTOR * opt,
        robust_ok: r + 1e-12 >= robust_greedy_bound(opt, k, eps),
    })
}

/// First diminishing-returns violation `(X, Y, x)` with `X ⊆ Y`, `x ∉ Y`,
/// checked exhaustively; `None` means `f` is submodular. Intended for
/// `n <= 10`.
pub fn find_submodularity_violation<F: SetFunction + ?Sized>(
    f: &F,
    tol: f64,
) -> Option<(Vec<usize>, Vec<usize>, usize)> {
    let n = f.ground_size();
    assert!(n <= 16, "exhaustive certification is exponential");
    let full = (1u64 << n) - 1;
    let values: Vec<f64> = (0..=full).map(|m| f.eval(&mask_to_vec(m))).collect();
    for y in 0..=full {
        // every subset x of y
        let mut xm = y;
        loop {
            for e in 0..n {
                let bit = 1u64 << e;
                if y & bit != 0 {
                    continue;
                }
                let gain_x = values[(xm | bit) as usize] - values[xm as usize];
                let gain_y = values[(y | bit) as usize] - values[y as usize];
                if gain_x + tol < gain_y {
                    return Some((mask_to_vec(xm), mask_to_vec(y), e));
                }
            }
            if xm == 0 {
                break;
            }
            xm = (xm - 1) & y;
        }
    }
    None
}

/// First pair `T ⊂ S` (differing in one element) with `f(T) > f(S)`.
pub fn find_monotonicity_violation<F: SetFunction + ?Sized>(f: &F, tol: f64) -> Option<(Vec<usize>, usize)> {
    let n = f.ground_size();
    assert!(n <= 20, "exhaustive certification is exponential");
    let full = (1u64 << n) - 1;
    for m in 0..=full {
        let base = mask_to_vec(m);
        for e in (0..n).filter(|e| m >> e & 1 == 0) {
            if f.marginal(&base, e) < -tol {
                return Some((base, e));
            }
        }
    }
    None
}
