//! Fan-out over independent jobs. Results always come back in job order, so
//! the output does not depend on the execution mode or the worker count.

use crate::metrics::{retained_mass, DeviationReport, MetricsError};
use crate::policy::{run_policy, PolicyConfig, PolicyError};
use crate::trace::AttentionTrace;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    /// Rayon's global pool. Without the `parallel` feature this runs
    /// sequentially.
    #[default]
    Parallel,
}

impl ExecMode {
    pub fn is_parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// `items.map(f)` in order, possibly across threads.
pub fn map_ordered<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    match mode {
        ExecMode::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        ExecMode::Parallel => par_map(items, f),
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("cell {cell}: {source}")]
    Policy {
        cell: usize,
        #[source]
        source: PolicyError,
    },
    #[error("cell {cell}: {source}")]
    Metrics {
        cell: usize,
        #[source]
        source: MetricsError,
    },
}

/// One (trace, policy) simulation in a grid.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub trace: usize,
    pub policy: PolicyConfig,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: usize,
    pub trace: usize,
    pub policy: PolicyConfig,
    pub deviation: DeviationReport,
    pub evictions: usize,
}

/// Simulates every cell and scores it against exact attention. The first
/// failing cell (in cell order) is returned as the error.
pub fn run_grid(
    mode: ExecMode,
    traces: &[AttentionTrace],
    cells: &[GridCell],
) -> Result<Vec<CellResult>, BatchError> {
    let results = map_ordered(mode, cells, |idx, cell| -> Result<CellResult, BatchError> {
        let trace = &traces[cell.trace];
        let sim = run_policy(trace, &cell.policy).map_err(|source| BatchError::Policy { cell: idx, source })?;
        let deviation = retained_mass(trace, &sim).map_err(|source| BatchError::Metrics { cell: idx, source })?;
        Ok(CellResult {
            cell: idx,
            trace: cell.trace,
            policy: cell.policy.clone(),
            evictions: sim.evictions(),
            deviation,
        })
    });
    results.into_iter().collect()
}

/// Full cross product, trace-major.
pub fn grid(trace_count: usize, policies: &[PolicyConfig]) -> Vec<GridCell> {
    (0..trace_count)
        .flat_map(|t| {
            policies.iter().map(move |p| GridCell {
                trace: t,
                policy: p.clone(),
            })
        })
        .collect()
}
