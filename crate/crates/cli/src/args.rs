use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kve_core::kv_cache::QuantizationSpec;
use kve_core::policy::{PolicyConfig, PolicyKind, ScoreFunction, SelfScoreInit};
use kve_core::submodular::NoiseMode;
use kve_core::trace::TraceKind;
use kve_core::ExecMode;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "kve", version, about = "KV-cache eviction simulator")]
pub struct Cli {
    /// Directory for every output file.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Decode a trace under one policy and score it against exact attention.
    Simulate(SimulateArgs),
    /// Sweep several policies over a set of budgets on one trace.
    Compare(CompareArgs),
    /// Per-row attention sparsity with head and layer aggregates.
    Sparsity(SparsityArgs),
    /// Heavy-hitter concentration of accumulated attention scores.
    Profile(ProfileArgs),
    /// Check greedy bounds on random instances and replay drifting families.
    SubmodularVerify(VerifyArgs),
    /// Newton's method on a random softmax-regression instance.
    Regress(RegressArgs),
    /// Write a synthetic trace.
    GenTrace(GenTraceArgs),
    /// Repeat the run recorded in a manifest.
    Rerun(RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Compare(_) => "compare",
            Command::Sparsity(_) => "sparsity",
            Command::Profile(_) => "profile",
            Command::SubmodularVerify(_) => "submodular-verify",
            Command::Regress(_) => "regress",
            Command::GenTrace(_) => "gen-trace",
            Command::Rerun(_) => "rerun",
        }
    }
}

/// `64` or `20%`. Percentages resolve against the trace length, rounded
/// down, and never below 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Budget {
    Absolute(usize),
    Percent(f64),
}

impl Budget {
    pub fn resolve(&self, n: usize) -> usize {
        match *self {
            Budget::Absolute(k) => k,
            Budget::Percent(p) => (((p / 100.0) * n as f64 + 1e-9).floor() as usize).max(2),
        }
    }
}

impl FromStr for Budget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(p) = s.strip_suffix('%') {
            let v: f64 = p.trim().parse().map_err(|_| format!("bad percentage `{s}`"))?;
            if !(v > 0.0 && v <= 100.0) {
                return Err(format!("percentage `{s}` outside (0, 100]"));
            }
            Ok(Budget::Percent(v))
        } else {
            let k: usize = s.parse().map_err(|_| format!("bad budget `{s}`"))?;
            if k == 0 {
                return Err("budget must be positive".into());
            }
            Ok(Budget::Absolute(k))
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Absolute(k) => write!(f, "{k}"),
            Budget::Percent(p) => write!(f, "{p}%"),
        }
    }
}

impl TryFrom<String> for Budget {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Budget> for String {
    fn from(b: Budget) -> Self {
        b.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelfScoreArg {
    SelfWeight,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecArg {
    #[default]
    Parallel,
    Sequential,
}

impl From<ExecArg> for ExecMode {
    fn from(e: ExecArg) -> Self {
        match e {
            ExecArg::Parallel => ExecMode::Parallel,
            ExecArg::Sequential => ExecMode::Sequential,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseArg {
    Uniform,
    Edges,
    AgainstBest,
}

impl From<NoiseArg> for NoiseMode {
    fn from(n: NoiseArg) -> Self {
        match n {
            NoiseArg::Uniform => NoiseMode::Uniform,
            NoiseArg::Edges => NoiseMode::Edges,
            NoiseArg::AgainstBest => NoiseMode::AgainstBest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FloorArg {
    Strong,
    Weak,
}

/// Knobs shared by every policy.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PolicyArgs {
    /// Fraction of the budget kept as the recent window.
    #[arg(long, default_value_t = 0.5)]
    pub recent_frac: f64,
    /// Leading tokens pinned by sink_local.
    #[arg(long, default_value_t = 4)]
    pub sink: usize,
    /// Period of the sparse patterns.
    #[arg(long, default_value_t = 8)]
    pub stride: usize,
    /// identity, sqrt1p or log1p.
    #[arg(long, default_value = "identity")]
    pub score_fn: ScoreFunction,
    #[arg(long, value_enum, default_value = "self-weight")]
    pub self_score: SelfScoreArg,
    /// Let the incoming token compete for eviction under h2o.
    #[arg(long)]
    pub no_protect_incoming: bool,
    /// Store cached keys at 4 or 8 bits.
    #[arg(long)]
    pub quant_bits: Option<u8>,
}

impl PolicyArgs {
    pub fn config(&self, kind: PolicyKind, budget: usize) -> Result<PolicyConfig, CliError> {
        if !(0.0..=1.0).contains(&self.recent_frac) {
            return Err(CliError::config("--recent-frac", "must lie in [0, 1]"));
        }
        if self.stride == 0 {
            return Err(CliError::config("--stride", "must be positive"));
        }
        let quant = match self.quant_bits {
            None => None,
            Some(b) => Some(QuantizationSpec::new(b).map_err(|e| CliError::config("--quant-bits", e))?),
        };
        let cfg = PolicyConfig::new(kind, budget)
            .with_recent_frac(self.recent_frac)
            .with_sink(self.sink)
            .with_stride(self.stride)
            .with_score_fn(self.score_fn)
            .with_self_score(match self.self_score {
                SelfScoreArg::SelfWeight => SelfScoreInit::SelfWeight,
                SelfScoreArg::Zero => SelfScoreInit::Zero,
            })
            .with_protect_incoming(!self.no_protect_incoming)
            .with_quantization(quant);
        cfg.validate().map_err(|e| CliError::config("--budget", e))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Trace file (.kvt binary or .json).
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, default_value = "h2o")]
    pub policy: PolicyKind,
    /// Cache slots, absolute (64) or a share of the trace length (20%).
    #[arg(long, default_value = "20%")]
    pub budget: Budget,
    #[command(flatten)]
    pub knobs: PolicyArgs,
    /// Also write the eviction log as JSON lines.
    #[arg(long)]
    pub events: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Comma-separated policy names.
    #[arg(long, value_delimiter = ',', default_value = "h2o,local")]
    pub policies: Vec<PolicyKind>,
    #[arg(long, value_delimiter = ',', default_value = "4%,10%,20%,60%,100%")]
    pub budgets: Vec<Budget>,
    #[command(flatten)]
    pub knobs: PolicyArgs,
    #[arg(long, value_enum, default_value = "parallel")]
    pub exec: ExecArg,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SparsityArgs {
    /// One or more trace files.
    #[arg(long, num_args = 1.., required = true)]
    pub trace: Vec<PathBuf>,
    /// Entries below this share of the row maximum count as sparse.
    #[arg(long, default_value_t = 0.01)]
    pub threshold: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ProfileArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Profile the scores left in this policy's cache instead of the
    /// full-attention accumulation.
    #[arg(long)]
    pub policy: Option<PolicyKind>,
    #[arg(long, default_value = "20%")]
    pub budget: Budget,
    #[command(flatten)]
    pub knobs: PolicyArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 500)]
    pub instances: usize,
    #[arg(long, default_value_t = 12)]
    pub max_n: usize,
    #[arg(long, default_value_t = 4)]
    pub max_k: usize,
    /// Additive error of the noisy marginal oracle.
    #[arg(long, default_value_t = 0.05)]
    pub eps: f64,
    #[arg(long, value_enum, default_value = "uniform")]
    pub noise: NoiseArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Drifting families to replay through the dynamic-condition checker.
    #[arg(long, default_value_t = 10)]
    pub families: usize,
    /// Tokens per drifting family.
    #[arg(long, default_value_t = 8)]
    pub family_n: usize,
    #[arg(long, default_value_t = 3)]
    pub family_k: usize,
    #[arg(long, default_value_t = 0.01)]
    pub drift: f64,
    #[arg(long, default_value_t = 0.01)]
    pub theta: f64,
    #[arg(long, default_value_t = 0.01)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub eps0: f64,
    #[arg(long, value_enum, default_value = "parallel")]
    pub exec: ExecArg,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RegressArgs {
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub d: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 30)]
    pub max_iter: usize,
    /// Spectral norm of A.
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
    /// Target curvature l.
    #[arg(long, default_value_t = 1.0)]
    pub l: f64,
    /// Multiplier on the exp-mass term.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Weight floor used to draw w.
    #[arg(long, value_enum, default_value = "strong")]
    pub floor: FloorArg,
    /// Every coordinate of the starting point.
    #[arg(long, default_value_t = 0.5)]
    pub x0: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenTraceArgs {
    #[arg(long, default_value = "power-law-keys")]
    pub kind: TraceKind,
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Power-law exponent.
    #[arg(long, default_value_t = 1.0)]
    pub exponent: f64,
    #[arg(long)]
    pub head: Option<u32>,
    #[arg(long)]
    pub layer: Option<u32>,
    /// Destination; `.json` writes JSON, anything else the binary format.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}
