//! Eviction policies and the decode-loop simulator.
//!
//! A simulation step `i` runs as follows:
//!
//! 1. query `i` attends over `C_i = S_{i-1} ∪ {i}`;
//! 2. the accumulated scores absorb that step's weights;
//! 3. if `|C_i| > k` the policy picks one victim `u ∈ C_i` and
//!    `S_i = C_i \ {u}`; otherwise `S_i = C_i`.
//!
//! Every policy evicts at most one token per step and never brings an evicted
//! token back.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{attend_with_keys, StepAttention};
use crate::kv_cache::{CacheError, CacheState, EvictionEvent, QuantizationSpec};
use crate::trace::AttentionTrace;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("full policy needs budget >= n (budget {budget}, n {n})")]
    BudgetExceeded { budget: usize, n: usize },
    #[error("inconsistent state: {0}")]
    InconsistentState(String),
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Full,
    Local,
    H2o,
    H2Only,
    SinkLocal,
    SparseStrided,
    SparseFixed,
    Topk,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 8] = [
        PolicyKind::Full,
        PolicyKind::Local,
        PolicyKind::H2o,
        PolicyKind::H2Only,
        PolicyKind::SinkLocal,
        PolicyKind::SparseStrided,
        PolicyKind::SparseFixed,
        PolicyKind::Topk,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Full => "full",
            PolicyKind::Local => "local",
            PolicyKind::H2o => "h2o",
            PolicyKind::H2Only => "h2_only",
            PolicyKind::SinkLocal => "sink_local",
            PolicyKind::SparseStrided => "sparse_strided",
            PolicyKind::SparseFixed => "sparse_fixed",
            PolicyKind::Topk => "topk",
        }
    }

    /// Policies that read the accumulated score vector.
    pub fn uses_scores(&self) -> bool {
        matches!(self, PolicyKind::H2o | PolicyKind::H2Only)
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| PolicyError::InvalidConfig(format!("unknown policy `{s}`")))
    }
}

/// `h` in `F_score(T) = h(sum_{s in T} score_s)`; non-decreasing on `[0, inf)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFunction {
    #[default]
    Identity,
    Sqrt1p,
    Log1p,
}

impl ScoreFunction {
    pub const ALL: [ScoreFunction; 3] = [
        ScoreFunction::Identity,
        ScoreFunction::Sqrt1p,
        ScoreFunction::Log1p,
    ];

    pub fn apply(&self, z: f64) -> f64 {
        match self {
            ScoreFunction::Identity => z,
            ScoreFunction::Sqrt1p => (z + 1.0).sqrt(),
            ScoreFunction::Log1p => z.ln_1p(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScoreFunction::Identity => "identity",
            ScoreFunction::Sqrt1p => "sqrt1p",
            ScoreFunction::Log1p => "log1p",
        }
    }
}

impl FromStr for ScoreFunction {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScoreFunction::ALL
            .into_iter()
            .find(|f| f.name() == s.trim())
            .ok_or_else(|| PolicyError::InvalidConfig(format!("unknown score function `{s}`")))
    }
}

/// How the incoming token's own score starts out.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfScoreInit {
    /// Its weight in the first step where it is the query.
    #[default]
    SelfWeight,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub budget: usize,
    /// Fraction of the budget reserved for the recent window.
    pub recent_frac: f64,
    /// Number of leading tokens pinned by `sink_local`.
    pub sink: usize,
    /// Pattern period for the sparse baselines.
    pub stride: usize,
    pub score_fn: ScoreFunction,
    pub self_score: SelfScoreInit,
    /// Under h2o, treat the incoming token as the newest member of a
    /// non-empty recent window. Off, it competes on score and may be the
    /// victim, which lets the window go stale once old scores dominate.
    #[serde(default = "default_true")]
    pub protect_incoming: bool,
    pub quantization: Option<QuantizationSpec>,
}

fn default_true() -> bool {
    true
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind, budget: usize) -> Self {
        Self {
            kind,
            budget,
            recent_frac: 0.5,
            sink: 4,
            stride: 8,
            score_fn: ScoreFunction::Identity,
            self_score: SelfScoreInit::SelfWeight,
            protect_incoming: true,
            quantization: None,
        }
    }

    pub fn with_recent_frac(mut self, recent_frac: f64) -> Self {
        self.recent_frac = recent_frac;
        self
    }

    pub fn with_sink(mut self, sink: usize) -> Self {
        self.sink = sink;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_score_fn(mut self, score_fn: ScoreFunction) -> Self {
        self.score_fn = score_fn;
        self
    }

    pub fn with_self_score(mut self, self_score: SelfScoreInit) -> Self {
        self.self_score = self_score;
        self
    }

    pub fn with_protect_incoming(mut self, on: bool) -> Self {
        self.protect_incoming = on;
        self
    }

    pub fn with_quantization(mut self, q: Option<QuantizationSpec>) -> Self {
        self.quantization = q;
        self
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.budget == 0 {
            return Err(PolicyError::InvalidConfig("budget must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.recent_frac) {
            return Err(PolicyError::InvalidConfig(format!(
                "recent fraction {} outside [0, 1]",
                self.recent_frac
            )));
        }
        if self.stride == 0 {
            return Err(PolicyError::InvalidConfig("stride must be positive".into()));
        }
        Ok(())
    }

    /// `floor(recent_frac * k)` slots for the recent window.
    pub fn recent_capacity(&self) -> usize {
        ((self.recent_frac * self.budget as f64).floor() as usize).min(self.budget)
    }

    /// Slots left for heavy hitters under h2o.
    pub fn heavy_budget(&self) -> usize {
        self.budget - self.recent_capacity()
    }
}

/// Running accumulated attention per cached token.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AccumulatedScores {
    scores: BTreeMap<usize, f64>,
    pub last_updated_step: usize,
}

impl AccumulatedScores {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, f64)>) -> Self {
        Self {
            scores: pairs.into_iter().collect(),
            last_updated_step: 0,
        }
    }

    pub fn get(&self, token: usize) -> Option<f64> {
        self.scores.get(&token).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.scores.iter().map(|(&t, &s)| (t, s))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.scores.values().copied().collect()
    }

    /// Adds one step's weights. The query token enters with its own weight,
    /// or zero under [`SelfScoreInit::Zero`].
    pub fn update(&mut self, step: &StepAttention, init: SelfScoreInit) {
        for &(token, w) in &step.weights {
            match self.scores.get_mut(&token) {
                Some(s) => *s += w,
                None => {
                    let start = if token == step.step && init == SelfScoreInit::Zero {
                        0.0
                    } else {
                        w
                    };
                    self.scores.insert(token, start);
                }
            }
        }
        self.last_updated_step = step.step;
    }

    pub fn remove(&mut self, token: usize) -> Option<f64> {
        self.scores.remove(&token)
    }
}

fn min_by_score(candidates: impl Iterator<Item = usize>, score: impl Fn(usize) -> f64) -> Option<usize> {
    // strict `<` keeps the lowest index among ties since candidates ascend
    let mut best: Option<(usize, f64)> = None;
    for t in candidates {
        let s = score(t);
        if best.is_none_or(|(_, b)| s < b) {
            best = Some((t, s));
        }
    }
    best.map(|(t, _)| t)
}

/// Literal removal argmax: the `v ∈ candidates` maximizing
/// `h(sum_{s ∈ universe \ {v}} score_s)`; ties go to the lowest index.
pub fn victim_by_removal_argmax(
    universe: &[usize],
    candidates: &[usize],
    scores: &AccumulatedScores,
    h: ScoreFunction,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    for &v in &cands {
        let total: f64 = universe
            .iter()
            .filter(|&&s| s != v)
            .map(|&s| scores.get(s).unwrap_or(0.0))
            .sum();
        let value = h.apply(total);
        if best.is_none_or(|(_, b)| value > b) {
            best = Some((v, value));
        }
    }
    best.map(|(v, _)| v)
}

/// Whether query `q` may see token `j` under the strided pattern.
pub fn strided_visible(q: usize, j: usize, stride: usize) -> bool {
    j <= q && ((q - j) < stride || (q - j).is_multiple_of(stride))
}

/// Whether query `q` may see token `j` under the fixed (block + summary
/// column) pattern.
pub fn fixed_visible(q: usize, j: usize, stride: usize) -> bool {
    j <= q && ((j - 1) / stride == (q - 1) / stride || j.is_multiple_of(stride))
}

/// Picks the token to evict at step `i`, or `None` when no eviction is due.
///
/// `step_attention` must already be folded into `scores`.
pub fn decide(
    policy: &PolicyConfig,
    scores: &AccumulatedScores,
    cache: &CacheState,
    step_attention: &StepAttention,
    i: usize,
) -> Result<Option<usize>, PolicyError> {
    if !cache.is_full() {
        return Ok(None);
    }
    if cache.contains(i) {
        return Err(PolicyError::InconsistentState(format!(
            "incoming token {i} already cached"
        )));
    }
    let candidates: Vec<usize> = cache.tracked().chain(std::iter::once(i)).collect();
    let score_of = |t: usize| -> Result<f64, PolicyError> {
        scores.get(t).ok_or_else(|| {
            PolicyError::InconsistentState(format!("no accumulated score for token {t}"))
        })
    };
    let victim = match policy.kind {
        PolicyKind::Full => {
            return Err(PolicyError::BudgetExceeded {
                budget: cache.budget(),
                n: i,
            })
        }
        PolicyKind::Local => candidates.iter().copied().min(),
        PolicyKind::SinkLocal => candidates
            .iter()
            .copied()
            .find(|&t| t > policy.sink)
            .or(Some(i)),
        PolicyKind::H2o | PolicyKind::H2Only => {
            let protect = policy.kind == PolicyKind::H2o;
            let window = policy.protect_incoming && policy.recent_capacity() > 0;
            let pool: Vec<usize> = candidates
                .into_iter()
                .filter(|&t| !(protect && (cache.is_recent(t) || (window && t == i))))
                .collect();
            for &t in &pool {
                score_of(t)?;
            }
            min_by_score(pool.into_iter(), |t| scores.get(t).unwrap())
        }
        PolicyKind::Topk => {
            let weight = |t: usize| step_attention.weight(t).unwrap_or(0.0);
            min_by_score(candidates.into_iter(), weight)
        }
        PolicyKind::SparseStrided | PolicyKind::SparseFixed => {
            // the surviving set serves the next query
            let next = i + 1;
            let visible = |t: usize| match policy.kind {
                PolicyKind::SparseStrided => strided_visible(next, t, policy.stride),
                _ => fixed_visible(next, t, policy.stride),
            };
            candidates
                .iter()
                .copied()
                .find(|&t| !visible(t))
                .or_else(|| candidates.iter().copied().min())
        }
    };
    Ok(victim)
}

/// One decode step of a simulation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    /// Attention of query `step` over `S_{step-1} ∪ {step}`.
    pub attention: StepAttention,
    pub evicted: Option<usize>,
    /// `S_step`, ascending.
    pub cached: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationRecord {
    pub config: PolicyConfig,
    pub n: usize,
    pub steps: Vec<StepRecord>,
    pub events: Vec<EvictionEvent>,
    pub final_scores: AccumulatedScores,
}

impl SimulationRecord {
    pub fn evictions(&self) -> usize {
        self.steps.iter().filter(|s| s.evicted.is_some()).count()
    }
}

/// Replays the budgeted generative process for every token of `trace`.
pub fn run_policy(trace: &AttentionTrace, policy: &PolicyConfig) -> Result<SimulationRecord, PolicyError> {
    policy.validate()?;
    let n = trace.n();
    if policy.kind == PolicyKind::Full && policy.budget < n {
        return Err(PolicyError::BudgetExceeded {
            budget: policy.budget,
            n,
        });
    }
    let mut cache = CacheState::new(policy.budget, trace.d(), policy.recent_capacity())?;
    let mut scores = AccumulatedScores::new();
    let mut steps = Vec::with_capacity(n);
    let mut events = Vec::with_capacity(n);
    let mut tokens = Vec::with_capacity(policy.budget + 1);

    for i in 1..=n {
        tokens.clear();
        tokens.extend(cache.tracked());
        tokens.push(i);
        let attention = attend_with_keys(i, trace.query(i), &tokens, |j| {
            if j == i {
                trace.key(i)
            } else {
                cache.key(j).expect("attended token is cached")
            }
        });
        scores.update(&attention, policy.self_score);

        let mut key = trace.key(i).to_vec();
        if let Some(q) = policy.quantization {
            q.round_trip(&mut key);
        }
        let event = if cache.is_full() {
            let victim = decide(policy, &scores, &cache, &attention, i)?.ok_or_else(|| {
                PolicyError::InconsistentState(format!("no victim chosen at step {i}"))
            })?;
            let ev = cache.swap(victim, i, &key)?;
            scores.remove(victim);
            ev
        } else {
            cache.admit(i, &key)?
        };
        steps.push(StepRecord {
            step: i,
            attention,
            evicted: event.evicted,
            cached: cache.tracked_vec(),
        });
        events.push(event);
    }

    Ok(SimulationRecord {
        config: policy.clone(),
        n,
        steps,
        events,
        final_scores: scores,
    })
}
