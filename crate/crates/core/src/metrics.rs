//! Reporting over traces and simulation records: attention sparsity,
//! retained mass / deviation from full attention, heavy-hitter concentration,
//! `(alpha, tau, k)`-good checks and cache memory accounting.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::attention::exact_step;
use crate::policy::{PolicyConfig, PolicyKind, SimulationRecord};
use crate::trace::AttentionTrace;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty row")]
    EmptyRow,
    #[error("threshold fraction {0} outside (0, 1)")]
    BadThreshold(f64),
    #[error("simulation does not match trace: {0}")]
    TraceMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Fraction of entries strictly below `threshold_frac * max(weights)`.
pub fn row_sparsity(weights: &[f64], threshold_frac: f64) -> Result<f64, MetricsError> {
    if weights.is_empty() {
        return Err(MetricsError::EmptyRow);
    }
    if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
        return Err(MetricsError::BadThreshold(threshold_frac));
    }
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cut = threshold_frac * max;
    let below = weights.iter().filter(|&&w| w < cut).count();
    Ok(below as f64 / weights.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityReport {
    pub threshold_frac: f64,
    pub rule: String,
    /// One entry per trace, in input order.
    pub traces: Vec<TraceSparsity>,
    /// Mean over every row of every trace.
    pub mean_over_rows: f64,
    /// Mean of per-head means, keyed by `(layer_id, head_id)`.
    pub per_head: BTreeMap<String, f64>,
    /// Mean of per-layer means, keyed by `layer_id`.
    pub per_layer: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSparsity {
    pub head_id: Option<u32>,
    pub layer_id: Option<u32>,
    pub rows: Vec<f64>,
    pub mean: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn id_label(id: Option<u32>) -> String {
    id.map_or_else(|| "-".to_string(), |v| v.to_string())
}

/// Per-row sparsity of the causal attention matrix of every trace, plus row,
/// head and layer aggregations.
pub fn sparsity_report(traces: &[&AttentionTrace], threshold_frac: f64) -> Result<SparsityReport, MetricsError> {
    let mut per_trace = Vec::with_capacity(traces.len());
    let mut all_rows = Vec::new();
    for t in traces {
        let mut rows = Vec::with_capacity(t.n());
        for i in 1..=t.n() {
            let step = exact_step(t, i).expect("index in range");
            let w: Vec<f64> = step.weights.iter().map(|p| p.1).collect();
            rows.push(row_sparsity(&w, threshold_frac)?);
        }
        all_rows.extend_from_slice(&rows);
        per_trace.push(TraceSparsity {
            head_id: t.head_id,
            layer_id: t.layer_id,
            mean: mean(&rows),
            rows,
        });
    }
    let mut heads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut layers: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ts in &per_trace {
        heads
            .entry(format!("{}/{}", id_label(ts.layer_id), id_label(ts.head_id)))
            .or_default()
            .push(ts.mean);
    }
    for (key, means) in &heads {
        let layer = key.split('/').next().unwrap().to_string();
        layers.entry(layer).or_default().push(mean(means));
    }
    Ok(SparsityReport {
        threshold_frac,
        rule: format!("entry < {threshold_frac} * row max"),
        traces: per_trace,
        mean_over_rows: mean(&all_rows),
        per_head: heads.into_iter().map(|(k, v)| (k, mean(&v))).collect(),
        per_layer: layers.into_iter().map(|(k, v)| (k, mean(&v))).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDeviation {
    pub step: usize,
    pub attended: usize,
    pub cache_size: usize,
    pub evicted: Option<usize>,
    /// Exact-attention mass on the tokens the query actually saw.
    pub retained_mass: f64,
    /// Total variation between masked and exact weights.
    pub tv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationReport {
    pub steps: Vec<StepDeviation>,
    pub mean_retained_mass: f64,
    pub mean_tv: f64,
}

/// Compares every step of `sim` with full attention on `trace`.
pub fn retained_mass(trace: &AttentionTrace, sim: &SimulationRecord) -> Result<DeviationReport, MetricsError> {
    if sim.n != trace.n() || sim.steps.len() != trace.n() {
        return Err(MetricsError::TraceMismatch(format!(
            "record covers {} steps, trace has {} tokens",
            sim.steps.len(),
            trace.n()
        )));
    }
    let mut steps = Vec::with_capacity(sim.steps.len());
    for rec in &sim.steps {
        let exact = exact_step(trace, rec.step)
            .map_err(|e| MetricsError::TraceMismatch(e.to_string()))?;
        // summing the dropped side keeps a full cache at exactly 1
        let mut dropped = 0.0;
        let mut tv = 0.0;
        let mut masked = rec.attention.weights.iter().peekable();
        for &(j, p) in &exact.weights {
            match masked.peek() {
                Some(&&(t, w)) if t == j => {
                    tv += (w - p).abs();
                    masked.next();
                }
                _ => {
                    dropped += p;
                    tv += p;
                }
            }
        }
        if masked.next().is_some() {
            return Err(MetricsError::TraceMismatch(format!(
                "step {} attends outside [1, {}]",
                rec.step, rec.step
            )));
        }
        steps.push(StepDeviation {
            step: rec.step,
            attended: rec.attention.len(),
            cache_size: rec.cached.len(),
            evicted: rec.evicted,
            retained_mass: (1.0 - dropped).clamp(0.0, 1.0),
            tv: 0.5 * tv,
        });
    }
    let mean_retained_mass = mean(&steps.iter().map(|s| s.retained_mass).collect::<Vec<_>>());
    let mean_tv = mean(&steps.iter().map(|s| s.tv).collect::<Vec<_>>());
    Ok(DeviationReport {
        steps,
        mean_retained_mass,
        mean_tv,
    })
}

/// Accumulated attention of every token under full attention, index `j-1`
/// holding token `j`.
pub fn full_accumulated_scores(trace: &AttentionTrace) -> Vec<f64> {
    let mut acc = vec![0.0; trace.n()];
    for i in 1..=trace.n() {
        let step = exact_step(trace, i).expect("index in range");
        for (j, w) in step.weights {
            acc[j - 1] += w;
        }
    }
    acc
}

/// Score token `j` would collect if every row were uniform:
/// `sum_{i=j}^{n} 1/i`.
pub fn uniform_expected_scores(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let mut tail = 0.0;
    for j in (1..=n).rev() {
        tail += 1.0 / j as f64;
        out[j - 1] = tail;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeavyHitterProfile {
    /// Scores sorted in descending order.
    pub curve: Vec<f64>,
    pub total: f64,
    pub top5: f64,
    pub top10: f64,
    pub top20: f64,
}

impl HeavyHitterProfile {
    /// Share of the total held by the top `ceil(frac * m)` tokens (at least one).
    pub fn share(&self, frac: f64) -> f64 {
        top_share(&self.curve, self.total, frac)
    }
}

fn top_share(desc: &[f64], total: f64, frac: f64) -> f64 {
    if desc.is_empty() || total <= 0.0 {
        return 0.0;
    }
    let count = ((frac * desc.len() as f64).ceil() as usize).clamp(1, desc.len());
    desc[..count].iter().sum::<f64>() / total
}

/// Sorted score curve and top-5/10/20% shares.
pub fn heavy_hitter_profile(scores: &[f64]) -> HeavyHitterProfile {
    let mut curve = scores.to_vec();
    curve.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = curve.iter().sum();
    HeavyHitterProfile {
        top5: top_share(&curve, total, 0.05),
        top10: top_share(&curve, total, 0.10),
        top20: top_share(&curve, total, 0.20),
        curve,
        total,
    }
}

/// Profile of the scores left in a simulation's cache at the end of the run.
pub fn simulation_profile(sim: &SimulationRecord) -> HeavyHitterProfile {
    heavy_hitter_profile(&sim.final_scores.values())
}

/// Profile of each token's accumulated score divided by its uniform-row
/// expectation. Raw accumulation favours early tokens, which are simply
/// visible for longer (uniform rows give the top 10% about a third of the
/// mass); the lift is flat for uniform rows.
pub fn lift_profile(trace: &AttentionTrace) -> HeavyHitterProfile {
    let acc = full_accumulated_scores(trace);
    let base = uniform_expected_scores(trace.n());
    let lift: Vec<f64> = acc.iter().zip(&base).map(|(a, b)| a / b).collect();
    heavy_hitter_profile(&lift)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleVerdict {
    pub core_contained: bool,
    pub excess: usize,
    pub excess_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoodDistributionCheck {
    pub core: Vec<usize>,
    pub tau: f64,
    pub alpha: f64,
    pub k: usize,
    pub samples: Vec<SampleVerdict>,
    pub good: bool,
    /// `S_0 ⊆ ∩_i supp_tau(x_i)`.
    pub core_in_intersection: bool,
    /// `|(∪_i supp_tau(x_i)) \ S_0|`.
    pub union_excess: usize,
    /// `union_excess <= alpha * k * (#samples)`.
    pub union_bound_ok: bool,
}

/// `supp_tau(x)`: indices whose value is at least `tau`.
pub fn tau_support(x: &[f64], tau: f64) -> BTreeSet<usize> {
    x.iter()
        .enumerate()
        .filter(|(_, &v)| v >= tau)
        .map(|(i, _)| i)
        .collect()
}

/// Checks the `(alpha, tau, k)`-good conditions on each sample together
/// with the two aggregate consequences over the whole sample set.
/// Coordinates are 0-based.
pub fn check_good_distribution(
    samples: &[Vec<f64>],
    core: &[usize],
    tau: f64,
    alpha: f64,
) -> Result<GoodDistributionCheck, MetricsError> {
    if !(tau > 0.0) {
        return Err(MetricsError::DimensionMismatch(format!("tau must be > 0, got {tau}")));
    }
    let m = samples.first().map_or(0, Vec::len);
    if let Some(bad) = samples.iter().position(|s| s.len() != m) {
        return Err(MetricsError::DimensionMismatch(format!(
            "sample {bad} has length {}, expected {m}",
            samples[bad].len()
        )));
    }
    if let Some(&c) = core.iter().find(|&&c| c >= m) {
        return Err(MetricsError::DimensionMismatch(format!(
            "core index {c} outside 0..{m}"
        )));
    }
    let core_set: BTreeSet<usize> = core.iter().copied().collect();
    let k = core_set.len();
    let limit = alpha * k as f64;

    let supports: Vec<BTreeSet<usize>> = samples.iter().map(|s| tau_support(s, tau)).collect();
    let verdicts: Vec<SampleVerdict> = supports
        .iter()
        .map(|supp| {
            let excess = supp.difference(&core_set).count();
            SampleVerdict {
                core_contained: core_set.is_subset(supp),
                excess,
                excess_ok: excess as f64 <= limit,
            }
        })
        .collect();
    let good = verdicts.iter().all(|v| v.core_contained && v.excess_ok);

    let mut intersection: Option<BTreeSet<usize>> = None;
    let mut union = BTreeSet::new();
    for supp in &supports {
        intersection = Some(match intersection {
            None => supp.clone(),
            Some(acc) => acc.intersection(supp).copied().collect(),
        });
        union.extend(supp.iter().copied());
    }
    let core_in_intersection = match &intersection {
        Some(inter) => core_set.is_subset(inter),
        None => true,
    };
    let union_excess = union.difference(&core_set).count();
    let union_bound_ok = union_excess as f64 <= limit * samples.len() as f64;
    if good {
        debug_assert!(core_in_intersection && union_bound_ok);
    }
    Ok(GoodDistributionCheck {
        core: core_set.into_iter().collect(),
        tau,
        alpha,
        k,
        samples: verdicts,
        good,
        core_in_intersection,
        union_excess,
        union_bound_ok,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryFootprint {
    pub slots: usize,
    pub key_bytes: f64,
    pub score_bytes: f64,
    pub total_bytes: f64,
    pub full_bytes: f64,
    /// Cached slots over sequence length: `k / n`.
    pub ratio: f64,
}

/// Cache bytes for a policy: `k*d` key scalars, plus one score per slot for
/// score-tracking policies. `bits_per_scalar` covers quantized storage.
pub fn memory_footprint(policy: &PolicyConfig, n: usize, d: usize, bits_per_scalar: u32) -> MemoryFootprint {
    let slots = if policy.kind == PolicyKind::Full {
        n
    } else {
        policy.budget.min(n)
    };
    let bytes = bits_per_scalar as f64 / 8.0;
    let key_bytes = (slots * d) as f64 * bytes;
    let score_bytes = if policy.kind.uses_scores() {
        slots as f64 * bytes
    } else {
        0.0
    };
    MemoryFootprint {
        slots,
        key_bytes,
        score_bytes,
        total_bytes: key_bytes + score_bytes,
        full_bytes: (n * d) as f64 * bytes,
        ratio: slots as f64 / n as f64,
    }
}
