//! Budget-`k` KV cache with preallocated slots.
//!
//! Keys live in one flat `k * d` buffer allocated up front. Admission fills
//! the next free slot during warmup; afterwards every eviction overwrites the
//! victim's slot in place, so slot addresses never change. The last
//! `recent_capacity` admitted tokens are tracked in a fixed-size ring
//! ([`RecentQueue`]).

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CacheError {
    #[error("cache is full ({0} slots); use swap")]
    CacheFull(usize),
    #[error("cache is not full; use admit")]
    NotFull,
    #[error("token {0} is already cached")]
    DuplicateToken(usize),
    #[error("token {0} is not cached")]
    EvictNotTracked(usize),
    #[error("key has {got} entries, cache expects {want}")]
    KeyDimension { got: usize, want: usize },
    #[error("budget must be positive")]
    ZeroBudget,
    #[error("quantization supports 4 or 8 bits, got {0}")]
    UnsupportedBits(u8),
}

/// Fixed-capacity ring of token indices, oldest at `head`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecentQueue {
    buf: Vec<usize>,
    head: usize,
    len: usize,
}

impl RecentQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            buf: vec![0; capacity],
            head: 0,
            len: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.buf.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.buf.len()
    }

    fn slot(&self, offset: usize) -> usize {
        (self.head + offset) % self.buf.len()
    }

    /// Appends at the tail; when full, the oldest entry retires and is returned.
    pub fn push(&mut self, token: usize) -> Option<usize> {
        let cap = self.buf.len();
        if cap == 0 {
            return Some(token);
        }
        if self.len < cap {
            let at = self.slot(self.len);
            self.buf[at] = token;
            self.len += 1;
            None
        } else {
            let old = self.buf[self.head];
            self.buf[self.head] = token;
            self.head = (self.head + 1) % cap;
            Some(old)
        }
    }

    /// Removes `token` if present, closing the gap by shifting newer entries
    /// one place towards the head.
    pub fn remove(&mut self, token: usize) -> bool {
        let Some(pos) = (0..self.len).find(|&o| self.buf[self.slot(o)] == token) else {
            return false;
        };
        for o in pos..self.len - 1 {
            let (dst, src) = (self.slot(o), self.slot(o + 1));
            self.buf[dst] = self.buf[src];
        }
        self.len -= 1;
        true
    }

    pub fn contains(&self, token: usize) -> bool {
        self.iter().any(|t| t == token)
    }

    /// Oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).map(move |o| self.buf[self.slot(o)])
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.iter().collect()
    }
}

/// One admission or eviction, in the JSON-lines shape used for replay logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionEvent {
    #[serde(rename = "i")]
    pub step: usize,
    pub evicted: Option<usize>,
    /// `None` when the incoming token was itself the victim.
    pub admitted: Option<usize>,
    #[serde(rename = "slot")]
    pub slot_written: Option<usize>,
}

/// Writes events as JSON lines.
pub fn write_events_jsonl<W: Write>(mut out: W, events: &[EvictionEvent]) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizationSpec {
    bits: u8,
}

impl QuantizationSpec {
    pub fn new(bits: u8) -> Result<Self, CacheError> {
        match bits {
            4 | 8 => Ok(Self { bits }),
            other => Err(CacheError::UnsupportedBits(other)),
        }
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    fn max_level(&self) -> f64 {
        ((1u32 << (self.bits - 1)) - 1) as f64
    }

    /// Symmetric per-vector scale: `max|x| / (2^(bits-1) - 1)`.
    pub fn scale(&self, x: &[f64]) -> f64 {
        x.iter().fold(0.0f64, |m, v| m.max(v.abs())) / self.max_level()
    }

    pub fn quantize(&self, x: &[f64]) -> (f64, Vec<i8>) {
        let scale = self.scale(x);
        if scale == 0.0 {
            return (0.0, vec![0; x.len()]);
        }
        let lim = self.max_level();
        let codes = x
            .iter()
            .map(|v| (v / scale).round().clamp(-lim, lim) as i8)
            .collect();
        (scale, codes)
    }

    pub fn dequantize(scale: f64, codes: &[i8]) -> Vec<f64> {
        codes.iter().map(|&c| scale * c as f64).collect()
    }

    /// Quantize-then-dequantize in place.
    pub fn round_trip(&self, x: &mut [f64]) {
        let (scale, codes) = self.quantize(x);
        for (v, c) in x.iter_mut().zip(codes) {
            *v = scale * c as f64;
        }
    }
}

#[derive(Debug, Clone)]
pub struct CacheState {
    budget: usize,
    dim: usize,
    keys: Vec<f64>,
    slot_tokens: Vec<Option<usize>>,
    tracked: BTreeMap<usize, usize>,
    recent: RecentQueue,
    filled: usize,
    step: usize,
}

impl CacheState {
    pub fn new(budget: usize, dim: usize, recent_capacity: usize) -> Result<Self, CacheError> {
        if budget == 0 {
            return Err(CacheError::ZeroBudget);
        }
        Ok(Self {
            budget,
            dim,
            keys: vec![0.0; budget * dim],
            slot_tokens: vec![None; budget],
            tracked: BTreeMap::new(),
            recent: RecentQueue::new(recent_capacity.min(budget)),
            filled: 0,
            step: 0,
        })
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.tracked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracked.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.tracked.len() == self.budget
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn contains(&self, token: usize) -> bool {
        self.tracked.contains_key(&token)
    }

    /// Cached token indices in ascending order.
    pub fn tracked(&self) -> impl Iterator<Item = usize> + '_ {
        self.tracked.keys().copied()
    }

    pub fn tracked_vec(&self) -> Vec<usize> {
        self.tracked.keys().copied().collect()
    }

    pub fn slot_of(&self, token: usize) -> Option<usize> {
        self.tracked.get(&token).copied()
    }

    pub fn slot_token(&self, slot: usize) -> Option<usize> {
        self.slot_tokens.get(slot).copied().flatten()
    }

    pub fn key(&self, token: usize) -> Option<&[f64]> {
        self.slot_of(token).map(|s| self.slot_key(s))
    }

    fn slot_key(&self, slot: usize) -> &[f64] {
        &self.keys[slot * self.dim..(slot + 1) * self.dim]
    }

    /// Address of the key storage; constant for the lifetime of the cache.
    pub fn storage_ptr(&self) -> *const f64 {
        self.keys.as_ptr()
    }

    pub fn recent(&self) -> &RecentQueue {
        &self.recent
    }

    pub fn is_recent(&self, token: usize) -> bool {
        self.recent.contains(token)
    }

    fn check_key(&self, key: &[f64]) -> Result<(), CacheError> {
        if key.len() != self.dim {
            return Err(CacheError::KeyDimension {
                got: key.len(),
                want: self.dim,
            });
        }
        Ok(())
    }

    fn write_slot(&mut self, slot: usize, token: usize, key: &[f64]) {
        self.keys[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(key);
        self.slot_tokens[slot] = Some(token);
        self.tracked.insert(token, slot);
    }

    /// Adds `token` to the next free slot while below budget.
    pub fn admit(&mut self, token: usize, key: &[f64]) -> Result<EvictionEvent, CacheError> {
        if self.is_full() {
            return Err(CacheError::CacheFull(self.budget));
        }
        if self.contains(token) {
            return Err(CacheError::DuplicateToken(token));
        }
        self.check_key(key)?;
        let slot = self.filled;
        self.filled += 1;
        self.write_slot(slot, token, key);
        self.recent.push(token);
        self.step = token;
        Ok(EvictionEvent {
            step: token,
            evicted: None,
            admitted: Some(token),
            slot_written: Some(slot),
        })
    }

    /// Replaces `evict` with `admit_token` in place. `evict == admit_token`
    /// drops the incoming token and leaves the cache untouched.
    pub fn swap(
        &mut self,
        evict: usize,
        admit_token: usize,
        key: &[f64],
    ) -> Result<EvictionEvent, CacheError> {
        if !self.is_full() {
            return Err(CacheError::NotFull);
        }
        if self.contains(admit_token) {
            return Err(CacheError::DuplicateToken(admit_token));
        }
        self.check_key(key)?;
        if evict == admit_token {
            self.step = admit_token;
            return Ok(EvictionEvent {
                step: admit_token,
                evicted: Some(admit_token),
                admitted: None,
                slot_written: None,
            });
        }
        let slot = self
            .tracked
            .remove(&evict)
            .ok_or(CacheError::EvictNotTracked(evict))?;
        self.recent.remove(evict);
        self.write_slot(slot, admit_token, key);
        self.recent.push(admit_token);
        self.step = admit_token;
        Ok(EvictionEvent {
            step: admit_token,
            evicted: Some(evict),
            admitted: Some(admit_token),
            slot_written: Some(slot),
        })
    }

    /// Replaces every cached key by its quantize/dequantize round trip.
    pub fn quantize_slots(&mut self, spec: QuantizationSpec) {
        for slot in 0..self.filled {
            let keys = &mut self.keys[slot * self.dim..(slot + 1) * self.dim];
            spec.round_trip(keys);
        }
    }
}
