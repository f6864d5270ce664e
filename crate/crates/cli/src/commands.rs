use std::path::{Path, PathBuf};

use kve_core::batch::{grid, map_ordered, run_grid};
use kve_core::dynamic::{replay_family, DriftingFamily, DynamicParams};
use kve_core::kv_cache::write_events_jsonl;
use kve_core::metrics::{
    full_accumulated_scores, heavy_hitter_profile, lift_profile, memory_footprint, retained_mass, sparsity_report,
};
use kve_core::policy::{run_policy, PolicyKind};
use kve_core::regression::{exp_mass, newton_solve, RegressionProblem, WeightFloor};
use kve_core::submodular::{check_random_instance, BRUTE_FORCE_MAX_N};
use kve_core::trace::{generate_trace, load_trace, save_trace, AttentionTrace, SyntheticTraceSpec, TraceError};
use nalgebra::DVector;
use serde::Serialize;

use crate::args::{
    CompareArgs, FloorArg, GenTraceArgs, ProfileArgs, RegressArgs, SimulateArgs, SparsityArgs, VerifyArgs,
};
use crate::error::CliError;
use crate::output::OutDir;

/// Bits per stored scalar in the memory report when keys are not quantized.
const FP16_BITS: u32 = 16;

pub fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

fn read_trace(path: &Path, flag: &str) -> Result<AttentionTrace, CliError> {
    load_trace(path).map_err(|e| match e {
        TraceError::Io(err) => CliError::io(path, err),
        other => CliError::config(flag, format!("{}: {other}", path.display())),
    })
}

/// Full attention never evicts, so its budget is always the trace length.
fn budget_for(kind: PolicyKind, requested: usize, n: usize) -> usize {
    if kind == PolicyKind::Full {
        n
    } else {
        requested
    }
}

fn memory_bits(quant: Option<u8>) -> u32 {
    quant.map_or(FP16_BITS, u32::from)
}

#[derive(Serialize)]
struct StepRow {
    i: usize,
    cache_size: usize,
    evicted: Option<usize>,
    retained_mass: f64,
    tv: f64,
}

#[derive(Serialize)]
struct SimulateSummary<'a> {
    trace: String,
    n: usize,
    d: usize,
    policy: &'a kve_core::PolicyConfig,
    budget: usize,
    evictions: usize,
    mean_retained_mass: f64,
    mean_tv: f64,
    memory: kve_core::metrics::MemoryFootprint,
}

pub fn simulate(args: &SimulateArgs, out: &mut OutDir) -> Result<(), CliError> {
    let trace = read_trace(&args.trace, "--trace")?;
    let n = trace.n();
    let budget = budget_for(args.policy, args.budget.resolve(n), n);
    let cfg = args.knobs.config(args.policy, budget)?;
    let sim = run_policy(&trace, &cfg).map_err(|e| CliError::config("--budget", e))?;
    let report = retained_mass(&trace, &sim).map_err(|e| CliError::Internal(e.to_string()))?;
    out.csv(
        "simulate.csv",
        report.steps.iter().map(|s| StepRow {
            i: s.step,
            cache_size: s.cache_size,
            evicted: s.evicted,
            retained_mass: s.retained_mass,
            tv: s.tv,
        }),
    )?;
    if args.events {
        let mut buf = Vec::new();
        write_events_jsonl(&mut buf, &sim.events).map_err(|e| CliError::Internal(e.to_string()))?;
        out.bytes("events.jsonl", &buf)?;
    }
    out.json(
        "simulate.json",
        &SimulateSummary {
            trace: args.trace.display().to_string(),
            n,
            d: trace.d(),
            policy: &cfg,
            budget,
            evictions: sim.evictions(),
            mean_retained_mass: report.mean_retained_mass,
            mean_tv: report.mean_tv,
            memory: memory_footprint(&cfg, n, trace.d(), memory_bits(args.knobs.quant_bits)),
        },
    )
}

#[derive(Serialize)]
struct CompareRow {
    policy: String,
    budget_spec: String,
    budget: usize,
    mean_retained_mass: f64,
    mean_tv: f64,
    memory_ratio: f64,
    evictions: usize,
}

pub fn compare(args: &CompareArgs, out: &mut OutDir) -> Result<(), CliError> {
    let mut policies: Vec<PolicyKind> = Vec::new();
    for &p in &args.policies {
        if policies.contains(&p) {
            eprintln!("warning: duplicate policy `{p}` ignored");
        } else {
            policies.push(p);
        }
    }
    if policies.len() < 2 {
        return Err(CliError::config("--policies", "needs at least two distinct policies"));
    }
    if args.budgets.is_empty() {
        return Err(CliError::config("--budgets", "needs at least one budget"));
    }
    let trace = read_trace(&args.trace, "--trace")?;
    let n = trace.n();
    let mut configs = Vec::new();
    let mut specs = Vec::new();
    for &p in &policies {
        for b in &args.budgets {
            configs.push(args.knobs.config(p, budget_for(p, b.resolve(n), n))?);
            specs.push(b.to_string());
        }
    }
    let cells = grid(1, &configs);
    let traces = [trace];
    let results = run_grid(args.exec.into(), &traces, &cells).map_err(|e| CliError::config("--budgets", e))?;
    let bits = memory_bits(args.knobs.quant_bits);
    let d = traces[0].d();
    let rows: Vec<CompareRow> = results
        .iter()
        .map(|r| CompareRow {
            policy: r.policy.kind.to_string(),
            budget_spec: specs[r.cell].clone(),
            budget: r.policy.budget,
            mean_retained_mass: r.deviation.mean_retained_mass,
            mean_tv: r.deviation.mean_tv,
            memory_ratio: memory_footprint(&r.policy, n, d, bits).ratio,
            evictions: r.evictions,
        })
        .collect();
    out.csv("compare.csv", rows.iter())?;
    #[derive(Serialize)]
    struct Summary<'a> {
        trace: String,
        n: usize,
        policies: Vec<String>,
        rows: &'a [CompareRow],
    }
    out.json(
        "compare.json",
        &Summary {
            trace: args.trace.display().to_string(),
            n,
            policies: policies.iter().map(|p| p.to_string()).collect(),
            rows: &rows,
        },
    )
}

#[derive(Serialize)]
struct SparsityRow {
    trace: usize,
    head: String,
    layer: String,
    row: usize,
    sparsity: f64,
}

pub fn sparsity(args: &SparsityArgs, out: &mut OutDir) -> Result<(), CliError> {
    let traces = args
        .trace
        .iter()
        .map(|p| read_trace(p, "--trace"))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&AttentionTrace> = traces.iter().collect();
    let report = sparsity_report(&refs, args.threshold).map_err(|e| CliError::config("--threshold", e))?;
    let label = |id: Option<u32>| id.map_or_else(|| "-".to_string(), |v| v.to_string());
    let rows = report.traces.iter().enumerate().flat_map(|(t, ts)| {
        ts.rows.iter().enumerate().map(move |(r, &s)| SparsityRow {
            trace: t,
            head: label(ts.head_id),
            layer: label(ts.layer_id),
            row: r + 1,
            sparsity: s,
        })
    });
    out.csv("sparsity.csv", rows)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        threshold_frac: f64,
        rule: &'a str,
        mean_over_rows: f64,
        trace_means: Vec<f64>,
        per_head: &'a std::collections::BTreeMap<String, f64>,
        per_layer: &'a std::collections::BTreeMap<String, f64>,
    }
    out.json(
        "sparsity.json",
        &Summary {
            threshold_frac: report.threshold_frac,
            rule: &report.rule,
            mean_over_rows: report.mean_over_rows,
            trace_means: report.traces.iter().map(|t| t.mean).collect(),
            per_head: &report.per_head,
            per_layer: &report.per_layer,
        },
    )
}

#[derive(Serialize)]
struct ProfileRow {
    rank: usize,
    token: usize,
    score: f64,
    cumulative_share: f64,
}

pub fn profile(args: &ProfileArgs, out: &mut OutDir) -> Result<(), CliError> {
    let trace = read_trace(&args.trace, "--trace")?;
    let n = trace.n();
    let mut pairs: Vec<(usize, f64)> = match args.policy {
        None => full_accumulated_scores(&trace)
            .into_iter()
            .enumerate()
            .map(|(j, s)| (j + 1, s))
            .collect(),
        Some(kind) => {
            let cfg = args.knobs.config(kind, budget_for(kind, args.budget.resolve(n), n))?;
            let sim = run_policy(&trace, &cfg).map_err(|e| CliError::config("--budget", e))?;
            sim.final_scores.iter().collect()
        }
    };
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let scores: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let hh = heavy_hitter_profile(&scores);
    let mut running = 0.0;
    let rows: Vec<ProfileRow> = pairs
        .iter()
        .enumerate()
        .map(|(r, &(token, score))| {
            running += score;
            ProfileRow {
                rank: r + 1,
                token,
                score,
                cumulative_share: if hh.total > 0.0 { running / hh.total } else { 0.0 },
            }
        })
        .collect();
    out.csv("profile.csv", rows.iter())?;
    let lift = lift_profile(&trace);
    #[derive(Serialize)]
    struct Summary {
        source: String,
        tokens: usize,
        total: f64,
        top5: f64,
        top10: f64,
        top20: f64,
        lift_top5: f64,
        lift_top10: f64,
        lift_top20: f64,
    }
    out.json(
        "profile.json",
        &Summary {
            source: args.policy.map_or_else(|| "full".to_string(), |p| p.to_string()),
            tokens: pairs.len(),
            total: hh.total,
            top5: hh.top5,
            top10: hh.top10,
            top20: hh.top20,
            lift_top5: lift.top5,
            lift_top10: lift.top10,
            lift_top20: lift.top20,
        },
    )
}

#[derive(Serialize)]
struct DynamicRow {
    family: usize,
    step: usize,
    opt: f64,
    value: Option<f64>,
    bound: f64,
    premises_hold: bool,
    value_holds: Option<bool>,
}

/// Returns the number of violated checks.
pub fn submodular_verify(args: &VerifyArgs, out: &mut OutDir) -> Result<usize, CliError> {
    if !(2..=BRUTE_FORCE_MAX_N).contains(&args.max_n) {
        return Err(CliError::config("--max-n", format!("must lie in 2..={BRUTE_FORCE_MAX_N}")));
    }
    if args.max_k == 0 {
        return Err(CliError::config("--max-k", "must be positive"));
    }
    if !(args.eps >= 0.0 && args.eps.is_finite()) {
        return Err(CliError::config("--eps", "must be a finite non-negative number"));
    }
    if args.families > 0 && !(1..=args.family_n).contains(&args.family_k) {
        return Err(CliError::config("--family-k", "must lie in 1..=--family-n"));
    }
    if args.family_n > 12 {
        return Err(CliError::config("--family-n", "exhaustive replay supports at most 12 tokens"));
    }
    let mode = args.exec.into();
    let ids: Vec<usize> = (0..args.instances).collect();
    let checks = map_ordered(mode, &ids, |_, &i| {
        check_random_instance(args.seed, i, args.max_n, args.max_k, args.eps, args.noise.into())
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()
    .map_err(|e| CliError::Internal(e.to_string()))?;
    out.csv("submodular.csv", checks.iter())?;

    let params = DynamicParams {
        k: args.family_k,
        theta: args.theta,
        gamma: args.gamma,
        eps0: args.eps0,
    };
    let fams: Vec<usize> = (0..args.families).collect();
    let reports = map_ordered(mode, &fams, |_, &f| {
        let seed = args.seed.wrapping_add(f as u64);
        let family = DriftingFamily::decaying(args.family_n, args.drift, 0.002, f % 2 == 0, seed);
        replay_family(&family, params, seed)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()
    .map_err(|e| CliError::Internal(e.to_string()))?;
    let rows = reports.iter().enumerate().flat_map(|(f, r)| {
        r.steps.iter().map(move |s| DynamicRow {
            family: f,
            step: s.step,
            opt: s.opt,
            value: s.value,
            bound: s.bound,
            premises_hold: s.premises_hold(),
            value_holds: s.value_holds,
        })
    });
    out.csv("dynamic.csv", rows)?;

    let greedy_violations = checks.iter().filter(|c| !c.greedy_ok).count();
    let robust_violations = checks.iter().filter(|c| !c.robust_ok).count();
    let trajectory_violations = reports.iter().filter(|r| !r.trajectory_holds).count();
    let implication_failures: usize = reports.iter().map(|r| r.implication_failures.len()).sum();
    #[derive(Serialize)]
    struct Summary {
        instances: usize,
        greedy_violations: usize,
        robust_violations: usize,
        families: usize,
        families_with_premise_failures: usize,
        trajectory_violations: usize,
        implication_failures: usize,
    }
    out.json(
        "submodular.json",
        &Summary {
            instances: checks.len(),
            greedy_violations,
            robust_violations,
            families: reports.len(),
            families_with_premise_failures: reports.iter().filter(|r| !r.all_conditions_hold()).count(),
            trajectory_violations,
            implication_failures,
        },
    )?;
    Ok(greedy_violations + robust_violations + trajectory_violations + implication_failures)
}

#[derive(Serialize)]
struct RegressRow {
    iter: usize,
    loss: f64,
    grad_norm: f64,
    min_eig: f64,
}

pub fn regress(args: &RegressArgs, out: &mut OutDir) -> Result<(), CliError> {
    if args.d == 0 {
        return Err(CliError::config("--d", "must be positive"));
    }
    if args.n < args.d {
        return Err(CliError::config("--n", "must be at least --d"));
    }
    if !(args.radius > 0.0 && args.radius.is_finite()) {
        return Err(CliError::config("--radius", "must be positive"));
    }
    if !(args.l > 0.0 && args.l.is_finite()) {
        return Err(CliError::config("--l", "must be positive"));
    }
    if !(args.lambda >= 0.0 && args.lambda.is_finite()) {
        return Err(CliError::config("--lambda", "must be non-negative"));
    }
    if !(args.tol > 0.0) {
        return Err(CliError::config("--tol", "must be positive"));
    }
    let floor = match args.floor {
        FloorArg::Strong => WeightFloor::Strong,
        FloorArg::Weak => WeightFloor::Weak,
    };
    let p = RegressionProblem::random(args.n, args.d, args.radius, args.l, args.seed, floor)
        .with_sparse_weight(args.lambda);
    let x0 = DVector::from_element(args.d, args.x0);
    let traj = newton_solve(&p, &x0, args.tol, args.max_iter).map_err(|e| CliError::Internal(e.to_string()))?;
    out.csv(
        "regress.csv",
        traj.states.iter().map(|s| RegressRow {
            iter: s.iter,
            loss: s.loss,
            grad_norm: s.grad_norm,
            min_eig: s.min_eig,
        }),
    )?;
    let x = traj.solution();
    #[derive(Serialize)]
    struct Summary {
        converged: bool,
        iterations: usize,
        grad_norm: f64,
        loss: f64,
        exp_mass: f64,
        pd_condition_holds: bool,
        damped_steps: usize,
        solution: Vec<f64>,
    }
    out.json(
        "regress.json",
        &Summary {
            converged: traj.converged,
            iterations: traj.iterations(),
            grad_norm: traj.last().grad_norm,
            loss: traj.last().loss,
            exp_mass: exp_mass(&p, &x).map_err(|e| CliError::Internal(e.to_string()))?,
            pd_condition_holds: p.pd_condition_holds(),
            damped_steps: traj.states.iter().filter(|s| s.damped).count(),
            solution: x.iter().copied().collect(),
        },
    )
}

pub fn gen_trace(args: &GenTraceArgs, out: &mut OutDir) -> Result<(), CliError> {
    if args.n == 0 {
        return Err(CliError::config("--n", "must be positive"));
    }
    if args.d == 0 {
        return Err(CliError::config("--d", "must be positive"));
    }
    let spec = SyntheticTraceSpec::new(args.n, args.d, args.kind, args.seed).with_exponent(args.exponent);
    let trace = generate_trace(&spec)
        .map_err(|e| CliError::config("--exponent", e))?
        .with_ids(args.head, args.layer);
    save_trace(&trace, &args.output).map_err(|e| match e {
        TraceError::Io(err) => CliError::io(&args.output, err),
        other => CliError::Internal(other.to_string()),
    })?;
    out.record(args.output.clone());
    out.json("gen-trace.json", &spec)
}
