//! One decode step of attention, either over every token seen so far
//! ([`exact_step`]) or restricted to the cached index set ([`masked_step`]).
//!
//! Masked positions are simply left out of the softmax. That is the same as
//! exponentiating zeroed logits and subtracting one per masked slot from the
//! normalizer, but costs `O(|S|)` instead of `O(i)`.

use serde::Serialize;
use thiserror::Error;

use crate::trace::{dot, AttentionTrace};

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("token index {index} out of range 1..={n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("current token {0} is not in the attended set")]
    CurrentTokenEvicted(usize),
    #[error("attended set is empty")]
    EmptySet,
    #[error("token {token} cannot be attended at step {step}")]
    FutureToken { token: usize, step: usize },
    #[error("token {0} listed twice")]
    DuplicateToken(usize),
}

/// Normalized attention of query `step` over a set of cached tokens.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepAttention {
    pub step: usize,
    /// `(token, weight)` sorted by token index; weights are positive and sum to 1.
    pub weights: Vec<(usize, f64)>,
    /// Natural log of the normalizer `D_i = sum_j exp(Q_i . K_j)`.
    pub log_normalizer: f64,
}

impl StepAttention {
    /// `D_i` itself. Overflows to infinity for very large logits; ratios are
    /// what matter and those live in `weights`.
    pub fn normalizer(&self) -> f64 {
        self.log_normalizer.exp()
    }

    pub fn weight(&self, token: usize) -> Option<f64> {
        self.weights
            .binary_search_by_key(&token, |&(t, _)| t)
            .ok()
            .map(|idx| self.weights[idx].1)
    }

    pub fn tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.weights.iter().map(|&(t, _)| t)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Max-shifted softmax over precomputed logits.
pub fn softmax_logits(step: usize, logits: &[(usize, f64)]) -> StepAttention {
    let max = logits
        .iter()
        .map(|&(_, l)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&(_, l)| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let weights = logits
        .iter()
        .zip(&exps)
        .map(|(&(t, _), e)| (t, e / sum))
        .collect();
    StepAttention {
        step,
        weights,
        log_normalizer: max + sum.ln(),
    }
}

/// Attention of `query` over `tokens` (sorted, distinct) with key rows looked
/// up through `key_of`.
pub fn attend_with_keys<'k, F>(step: usize, query: &[f64], tokens: &[usize], key_of: F) -> StepAttention
where
    F: Fn(usize) -> &'k [f64],
{
    let logits: Vec<(usize, f64)> = tokens.iter().map(|&j| (j, dot(query, key_of(j)))).collect();
    softmax_logits(step, &logits)
}

fn check_index(trace: &AttentionTrace, i: usize) -> Result<(), AttentionError> {
    if i == 0 || i > trace.n() {
        return Err(AttentionError::IndexOutOfRange { index: i, n: trace.n() });
    }
    Ok(())
}

/// Full-knowledge attention of token `i` over `[i]`.
pub fn exact_step(trace: &AttentionTrace, i: usize) -> Result<StepAttention, AttentionError> {
    check_index(trace, i)?;
    let tokens: Vec<usize> = (1..=i).collect();
    Ok(attend_with_keys(i, trace.query(i), &tokens, |j| trace.key(j)))
}

/// Attention of token `i` restricted to `set`, which must contain `i` and only
/// indices `<= i`. Order of `set` is irrelevant.
pub fn masked_step(
    trace: &AttentionTrace,
    i: usize,
    set: &[usize],
) -> Result<StepAttention, AttentionError> {
    check_index(trace, i)?;
    let tokens = normalize_set(i, set)?;
    Ok(attend_with_keys(i, trace.query(i), &tokens, |j| trace.key(j)))
}

/// Sorts and validates an attended set for query `i`.
pub fn normalize_set(i: usize, set: &[usize]) -> Result<Vec<usize>, AttentionError> {
    if set.is_empty() {
        return Err(AttentionError::EmptySet);
    }
    let mut tokens = set.to_vec();
    tokens.sort_unstable();
    if let Some(w) = tokens.windows(2).find(|w| w[0] == w[1]) {
        return Err(AttentionError::DuplicateToken(w[0]));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t == 0 || t > i) {
        return Err(AttentionError::FutureToken { token: bad, step: i });
    }
    if tokens.binary_search(&i).is_err() {
        return Err(AttentionError::CurrentTokenEvicted(i));
    }
    Ok(tokens)
}
