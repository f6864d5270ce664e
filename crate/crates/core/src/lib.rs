//! KV-cache eviction simulator: attention traces, cache policies, deviation
//! metrics, a submodular-maximization lab and softmax-regression numerics.

pub mod attention;
pub mod batch;
pub mod dynamic;
pub mod kv_cache;
pub mod metrics;
pub mod policy;
pub mod regression;
pub mod submodular;
pub mod trace;

pub use attention::{exact_step, masked_step, StepAttention};
pub use batch::ExecMode;
pub use kv_cache::{CacheState, EvictionEvent, QuantizationSpec};
pub use policy::{run_policy, PolicyConfig, PolicyKind, ScoreFunction, SelfScoreInit, SimulationRecord};
pub use trace::{generate_trace, AttentionTrace, SyntheticTraceSpec, TraceKind};
