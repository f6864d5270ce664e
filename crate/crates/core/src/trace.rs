//! Attention traces: per-head query/key matrices that drive a decode
//! simulation, their on-disk formats, and deterministic synthetic generators.
//!
//! Token indices are 1-based everywhere in this crate: token `i` owns query
//! row `i` and key row `i`.
//!
//! Two file formats are accepted by [`load_trace`]:
//!
//! * binary: magic `KVT1`, little-endian `u32 n`, `u32 d`, then `n*d` `f64`
//!   query entries row-major, then `n*d` `f64` key entries row-major;
//! * JSON: `{"n":..,"d":..,"Q":[[..]],"K":[[..]]}`.
//!
//! The loader picks the format by sniffing the magic bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"KVT1";
const HEADER_LEN: usize = 12;

/// Logit reached by the heaviest key of a power-law trace.
pub const POWER_LAW_PEAK_LOGIT: f64 = 12.0;
/// Logit of the dominant key in sink-dominant and mid-heavy traces.
pub const DOMINANT_LOGIT: f64 = 6.0;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("malformed trace at byte {offset}: {reason}")]
    MalformedTrace { offset: usize, reason: String },
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("invalid synthetic trace spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn malformed(offset: usize, reason: impl Into<String>) -> TraceError {
    TraceError::MalformedTrace {
        offset,
        reason: reason.into(),
    }
}

/// Query and key matrices of one attention head, both `n x d`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionTrace {
    n: usize,
    d: usize,
    q: Vec<f64>,
    k: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_id: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer_id: Option<u32>,
}

impl AttentionTrace {
    /// Builds a trace from row-major query and key buffers.
    pub fn new(n: usize, d: usize, q: Vec<f64>, k: Vec<f64>) -> Result<Self, TraceError> {
        if n == 0 || d == 0 {
            return Err(TraceError::InvalidTrace(format!(
                "sizes must be positive (n={n}, d={d})"
            )));
        }
        let want = n
            .checked_mul(d)
            .ok_or_else(|| TraceError::InvalidTrace("n*d overflows".into()))?;
        if q.len() != want || k.len() != want {
            return Err(TraceError::InvalidTrace(format!(
                "Q has {} entries and K has {}, expected {want}",
                q.len(),
                k.len()
            )));
        }
        if let Some(pos) = q.iter().chain(k.iter()).position(|v| !v.is_finite()) {
            return Err(TraceError::InvalidTrace(format!(
                "non-finite entry at flat position {pos}"
            )));
        }
        Ok(Self {
            n,
            d,
            q,
            k,
            head_id: None,
            layer_id: None,
        })
    }

    /// Builds a trace from nested rows; `q` and `k` must have identical shapes.
    pub fn from_rows(q: &[Vec<f64>], k: &[Vec<f64>]) -> Result<Self, TraceError> {
        let n = q.len();
        if k.len() != n {
            return Err(TraceError::InvalidTrace(format!(
                "Q has {n} rows, K has {}",
                k.len()
            )));
        }
        let d = q.first().map_or(0, Vec::len);
        if q.iter().chain(k.iter()).any(|r| r.len() != d) {
            return Err(TraceError::InvalidTrace("ragged rows".into()));
        }
        Self::new(n, d, q.concat(), k.concat())
    }

    pub fn with_ids(mut self, head_id: Option<u32>, layer_id: Option<u32>) -> Self {
        self.head_id = head_id;
        self.layer_id = layer_id;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Query row of token `i` (1-based).
    pub fn query(&self, i: usize) -> &[f64] {
        let r = i - 1;
        &self.q[r * self.d..(r + 1) * self.d]
    }

    /// Key row of token `j` (1-based).
    pub fn key(&self, j: usize) -> &[f64] {
        let r = j - 1;
        &self.k[r * self.d..(r + 1) * self.d]
    }

    pub fn queries(&self) -> &[f64] {
        &self.q
    }

    pub fn keys(&self) -> &[f64] {
        &self.k
    }

    /// `Q_i . K_j`.
    pub fn logit(&self, i: usize, j: usize) -> f64 {
        dot(self.query(i), self.key(j))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Deserialize)]
struct JsonTrace {
    n: usize,
    d: usize,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    #[serde(rename = "K")]
    k: Vec<Vec<f64>>,
    #[serde(default)]
    head_id: Option<u32>,
    #[serde(default)]
    layer_id: Option<u32>,
}

#[derive(Serialize)]
struct JsonTraceRef<'a> {
    n: usize,
    d: usize,
    #[serde(rename = "Q")]
    q: Vec<&'a [f64]>,
    #[serde(rename = "K")]
    k: Vec<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    head_id: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layer_id: Option<u32>,
}

/// Parses a trace from raw bytes, auto-detecting binary vs JSON.
pub fn parse_trace(bytes: &[u8]) -> Result<AttentionTrace, TraceError> {
    if bytes.starts_with(MAGIC) {
        parse_binary(bytes)
    } else {
        parse_json(bytes)
    }
}

fn parse_binary(bytes: &[u8]) -> Result<AttentionTrace, TraceError> {
    if bytes.len() < HEADER_LEN {
        return Err(malformed(bytes.len(), "truncated header"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if n == 0 || d == 0 {
        return Err(malformed(4, format!("header declares n={n}, d={d}")));
    }
    let row_bytes = d * 8;
    let body = &bytes[HEADER_LEN..];
    let read_block = |block: usize| -> Result<Vec<f64>, TraceError> {
        let start = block * n * row_bytes;
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            let off = start + r * row_bytes;
            if off + row_bytes > body.len() {
                let name = if block == 0 { "Q" } else { "K" };
                return Err(malformed(
                    HEADER_LEN + body.len(),
                    format!("{name} block has {r} rows, expected {n}"),
                ));
            }
            for c in 0..d {
                let at = off + c * 8;
                let v = f64::from_le_bytes(body[at..at + 8].try_into().unwrap());
                if !v.is_finite() {
                    return Err(malformed(HEADER_LEN + at, "non-finite entry"));
                }
                out.push(v);
            }
        }
        Ok(out)
    };
    let q = read_block(0)?;
    let k = read_block(1)?;
    let expected = HEADER_LEN + 2 * n * row_bytes;
    if bytes.len() != expected {
        return Err(malformed(expected, "trailing bytes after K block"));
    }
    AttentionTrace::new(n, d, q, k)
}

fn parse_json(bytes: &[u8]) -> Result<AttentionTrace, TraceError> {
    let raw: JsonTrace = serde_json::from_slice(bytes).map_err(|e| {
        // serde_json reports line/column; convert to a byte offset.
        let offset = line_col_to_offset(bytes, e.line(), e.column());
        malformed(offset, e.to_string())
    })?;
    if raw.n == 0 || raw.d == 0 {
        return Err(malformed(0, format!("n={}, d={}", raw.n, raw.d)));
    }
    for (name, rows) in [("Q", &raw.q), ("K", &raw.k)] {
        if rows.len() != raw.n {
            return Err(malformed(
                0,
                format!("{name} block has {} rows, expected {}", rows.len(), raw.n),
            ));
        }
        if let Some(r) = rows.iter().position(|row| row.len() != raw.d) {
            return Err(malformed(
                0,
                format!("{name} row {} has {} columns, expected {}", r + 1, rows[r].len(), raw.d),
            ));
        }
    }
    AttentionTrace::new(raw.n, raw.d, raw.q.concat(), raw.k.concat())
        .map(|t| t.with_ids(raw.head_id, raw.layer_id))
}

fn line_col_to_offset(bytes: &[u8], line: usize, col: usize) -> usize {
    let mut cur_line = 1;
    for (idx, b) in bytes.iter().enumerate() {
        if cur_line == line {
            return (idx + col.saturating_sub(1)).min(bytes.len());
        }
        if *b == b'\n' {
            cur_line += 1;
        }
    }
    bytes.len()
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<AttentionTrace, TraceError> {
    let bytes = fs::read(path)?;
    parse_trace(&bytes)
}

/// Encodes a trace in the `KVT1` binary format.
pub fn encode_binary(trace: &AttentionTrace) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 16 * trace.n * trace.d);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(trace.n as u32).to_le_bytes());
    out.extend_from_slice(&(trace.d as u32).to_le_bytes());
    for v in trace.q.iter().chain(trace.k.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_json(trace: &AttentionTrace) -> String {
    let view = JsonTraceRef {
        n: trace.n,
        d: trace.d,
        q: trace.q.chunks(trace.d).collect(),
        k: trace.k.chunks(trace.d).collect(),
        head_id: trace.head_id,
        layer_id: trace.layer_id,
    };
    serde_json::to_string(&view).expect("trace serialization cannot fail")
}

/// Writes `trace` to `path`. A `.json` extension selects the JSON format,
/// anything else the binary one.
pub fn save_trace(trace: &AttentionTrace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    if trace.n == 0 {
        return Err(TraceError::InvalidTrace("n must be at least 1".into()));
    }
    let path = path.as_ref();
    let json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let mut f = fs::File::create(path)?;
    if json {
        f.write_all(encode_json(trace).as_bytes())?;
    } else {
        f.write_all(&encode_binary(trace))?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceKind {
    UniformGaussian,
    PowerLawKeys,
    SinkDominant,
    /// One dominant key placed in the middle half of the sequence.
    MidHeavy,
}

impl std::str::FromStr for TraceKind {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform-gaussian" => Ok(Self::UniformGaussian),
            "power-law-keys" => Ok(Self::PowerLawKeys),
            "sink-dominant" => Ok(Self::SinkDominant),
            "mid-heavy" => Ok(Self::MidHeavy),
            other => Err(TraceError::InvalidSpec(format!("unknown trace kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for TraceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::UniformGaussian => "uniform-gaussian",
            Self::PowerLawKeys => "power-law-keys",
            Self::SinkDominant => "sink-dominant",
            Self::MidHeavy => "mid-heavy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTraceSpec {
    pub n: usize,
    pub d: usize,
    pub kind: TraceKind,
    /// Only read for [`TraceKind::PowerLawKeys`].
    pub power_exponent: f64,
    pub seed: u64,
}

impl SyntheticTraceSpec {
    pub fn new(n: usize, d: usize, kind: TraceKind, seed: u64) -> Self {
        Self {
            n,
            d,
            kind,
            power_exponent: 1.0,
            seed,
        }
    }

    pub fn with_exponent(mut self, power_exponent: f64) -> Self {
        self.power_exponent = power_exponent;
        self
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d, 1.0);
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Queries share a common direction `u`; key `j` is `s_j * u` plus isotropic
/// noise, so the logit `Q_i . K_j` is roughly `s_j`.
fn aligned_trace(rng: &mut ChaCha8Rng, n: usize, d: usize, strengths: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let u = unit_vec(rng, d);
    let noise = 1.0 / (d as f64).sqrt();
    let mut q = Vec::with_capacity(n * d);
    let mut k = Vec::with_capacity(n * d);
    for _ in 0..n {
        let eta = gaussian_vec(rng, d, 0.25 * noise);
        q.extend(u.iter().zip(&eta).map(|(a, b)| a + b));
    }
    for &s in strengths {
        let e = gaussian_vec(rng, d, 0.5 * noise);
        k.extend(u.iter().zip(&e).map(|(a, b)| s * a + b));
    }
    (q, k)
}

/// Generates a synthetic trace; output is a pure function of `spec`.
pub fn generate_trace(spec: &SyntheticTraceSpec) -> Result<AttentionTrace, TraceError> {
    let SyntheticTraceSpec { n, d, kind, .. } = *spec;
    if n == 0 || d == 0 {
        return Err(TraceError::InvalidSpec(format!(
            "sizes must be positive (n={n}, d={d})"
        )));
    }
    if kind == TraceKind::PowerLawKeys
        && !(spec.power_exponent.is_finite() && spec.power_exponent > 0.0)
    {
        return Err(TraceError::InvalidSpec(format!(
            "power_exponent must be > 0, got {}",
            spec.power_exponent
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (q, k) = match kind {
        TraceKind::UniformGaussian => {
            // entries ~ N(0, d^{-1/2}) give logits of unit variance
            let scale = (d as f64).powf(-0.25);
            (
                gaussian_vec(&mut rng, n * d, scale),
                gaussian_vec(&mut rng, n * d, scale),
            )
        }
        TraceKind::PowerLawKeys => {
            let mut ranks: Vec<usize> = (1..=n).collect();
            ranks.shuffle(&mut rng);
            let strengths: Vec<f64> = ranks
                .iter()
                .map(|&r| POWER_LAW_PEAK_LOGIT * (r as f64).powf(-spec.power_exponent))
                .collect();
            aligned_trace(&mut rng, n, d, &strengths)
        }
        TraceKind::SinkDominant => {
            let mut strengths = vec![0.0; n];
            strengths[0] = DOMINANT_LOGIT;
            aligned_trace(&mut rng, n, d, &strengths)
        }
        TraceKind::MidHeavy => {
            let pos = mid_heavy_position(n, &mut rng);
            let mut strengths = vec![0.0; n];
            strengths[pos - 1] = DOMINANT_LOGIT;
            aligned_trace(&mut rng, n, d, &strengths)
        }
    };
    AttentionTrace::new(n, d, q, k)
}

fn mid_heavy_position(n: usize, rng: &mut ChaCha8Rng) -> usize {
    if n < 4 {
        return n.div_ceil(2);
    }
    rng.random_range(n / 4 + 1..=3 * n / 4)
}
