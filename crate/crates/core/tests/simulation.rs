use std::collections::BTreeSet;

use kve_core::attention::exact_step;
use kve_core::kv_cache::{write_events_jsonl, CacheState, EvictionEvent, QuantizationSpec};
use kve_core::metrics::{
    full_accumulated_scores, heavy_hitter_profile, lift_profile, memory_footprint, retained_mass, simulation_profile,
    sparsity_report,
};
use kve_core::policy::{fixed_visible, run_policy, strided_visible, PolicyConfig, PolicyKind, SelfScoreInit};
use kve_core::trace::{generate_trace, AttentionTrace, SyntheticTraceSpec, TraceKind};

fn power_law(n: usize, seed: u64) -> AttentionTrace {
    generate_trace(&SyntheticTraceSpec::new(n, 16, TraceKind::PowerLawKeys, seed)).unwrap()
}

#[test]
fn full_policy_reproduces_exact_attention() {
    let t = power_law(60, 4);
    let sim = run_policy(&t, &PolicyConfig::new(PolicyKind::Full, 60)).unwrap();
    for s in &sim.steps {
        let ex = exact_step(&t, s.step).unwrap();
        assert_eq!(s.attention.weights.len(), ex.weights.len());
        for (a, b) in s.attention.weights.iter().zip(&ex.weights) {
            assert_eq!(a.0, b.0);
            assert!((a.1 - b.1).abs() < 1e-15);
        }
    }
    let rep = retained_mass(&t, &sim).unwrap();
    assert!(rep.steps.iter().all(|s| (s.retained_mass - 1.0).abs() < 1e-12 && s.tv < 1e-12));
    assert!(matches!(
        run_policy(&t, &PolicyConfig::new(PolicyKind::Full, 59)),
        Err(kve_core::policy::PolicyError::BudgetExceeded { budget: 59, n: 60 })
    ));
}

#[test]
fn budget_at_least_n_never_evicts() {
    let t = power_law(40, 2);
    let full = run_policy(&t, &PolicyConfig::new(PolicyKind::Full, 40)).unwrap();
    for kind in PolicyKind::ALL {
        let sim = run_policy(&t, &PolicyConfig::new(kind, 45)).unwrap();
        assert_eq!(sim.evictions(), 0, "{kind}");
        for (a, b) in sim.steps.iter().zip(&full.steps) {
            assert_eq!(a.attention, b.attention);
            assert_eq!(a.cached, b.cached);
        }
    }
}

#[test]
fn h2o_beats_local_on_most_steps() {
    // counted over the pooled steps of 20 seeds; single seeds can dip below 90%
    let (mut wins, mut total) = (0, 0);
    for seed in 0..20 {
        let t = power_law(256, seed);
        let k = 256 / 5;
        let h = retained_mass(&t, &run_policy(&t, &PolicyConfig::new(PolicyKind::H2o, k)).unwrap()).unwrap();
        let l = retained_mass(&t, &run_policy(&t, &PolicyConfig::new(PolicyKind::Local, k)).unwrap()).unwrap();
        wins += h
            .steps
            .iter()
            .zip(&l.steps)
            .filter(|(a, b)| a.retained_mass >= b.retained_mass)
            .count();
        total += 256;
        assert!(h.mean_retained_mass > l.mean_retained_mass, "seed {seed}");
    }
    assert!(wins as f64 >= 0.9 * total as f64, "{wins}/{total}");
}

#[test]
fn literal_incoming_rule_starves_the_window() {
    // with the incoming token unprotected, nearly every new token is dropped
    let t = power_law(256, 0);
    let cfg = PolicyConfig::new(PolicyKind::H2o, 51).with_protect_incoming(false);
    let sim = run_policy(&t, &cfg).unwrap();
    let self_evictions = sim.steps.iter().filter(|s| s.evicted == Some(s.step)).count();
    assert!(self_evictions > 150, "{self_evictions}");
    let strict = retained_mass(&t, &sim).unwrap().mean_retained_mass;
    let default = retained_mass(&t, &run_policy(&t, &PolicyConfig::new(PolicyKind::H2o, 51)).unwrap())
        .unwrap()
        .mean_retained_mass;
    assert!(default > strict);
}

#[test]
fn events_and_slots_are_consistent() {
    let t = power_law(120, 9);
    for kind in PolicyKind::ALL.into_iter().filter(|&k| k != PolicyKind::Full) {
        let k = 17;
        let sim = run_policy(&t, &PolicyConfig::new(kind, k)).unwrap();
        let mut slots = BTreeSet::new();
        for (s, ev) in sim.steps.iter().zip(&sim.events) {
            assert_eq!(ev.step, s.step);
            assert_eq!(ev.evicted.is_none(), s.step <= k, "{kind} step {}", s.step);
            if let Some(v) = ev.evicted {
                assert!(!s.cached.contains(&v));
            }
            if let Some(a) = ev.admitted {
                assert!(s.cached.contains(&a));
            }
            slots.extend(ev.slot_written);
        }
        assert_eq!(slots.len(), k, "{kind}");
        assert!(slots.iter().all(|&s| s < k));
    }
}

#[test]
fn eviction_overwrites_in_place() {
    let mut c = CacheState::new(3, 2, 1).unwrap();
    let ptr = c.storage_ptr();
    for t in 1..=3 {
        c.admit(t, &[t as f64, 0.0]).unwrap();
    }
    let slot3 = c.slot_of(3).unwrap();
    let ev = c.swap(3, 4, &[4.0, 0.0]).unwrap();
    assert_eq!(ev.slot_written, Some(slot3));
    assert_eq!(c.slot_token(slot3), Some(4));
    assert_eq!(c.tracked_vec(), vec![1, 2, 4]);
    assert_eq!(c.key(4).unwrap(), &[4.0, 0.0]);
    assert_eq!(c.storage_ptr(), ptr);
}

#[test]
fn event_log_round_trips_as_json_lines() {
    let t = power_law(30, 1);
    let sim = run_policy(&t, &PolicyConfig::new(PolicyKind::H2o, 8)).unwrap();
    let mut buf = Vec::new();
    write_events_jsonl(&mut buf, &sim.events).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let back: Vec<EvictionEvent> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, sim.events);
    assert!(text.lines().next().unwrap().starts_with(r#"{"i":1,"evicted":null,"admitted":1,"slot":0}"#));
}

#[test]
fn sink_local_keeps_sinks_and_drops_mid_sequence_token() {
    let t = generate_trace(&SyntheticTraceSpec::new(200, 16, TraceKind::MidHeavy, 3)).unwrap();
    let acc = full_accumulated_scores(&t);
    let dominant = (1..=200).max_by(|&a, &b| acc[a - 1].total_cmp(&acc[b - 1])).unwrap();
    assert!((51..=150).contains(&dominant));
    let sink = run_policy(&t, &PolicyConfig::new(PolicyKind::SinkLocal, 40)).unwrap();
    let h2o = run_policy(&t, &PolicyConfig::new(PolicyKind::H2o, 40)).unwrap();
    let last_sink = sink.steps.last().unwrap();
    assert!((1..=4).all(|s| last_sink.cached.contains(&s)));
    assert!(!last_sink.cached.contains(&dominant));
    assert!(h2o.steps.last().unwrap().cached.contains(&dominant));
}

#[test]
fn sparse_policies_keep_next_query_pattern_when_possible() {
    let t = power_law(100, 5);
    for (kind, visible) in [
        (PolicyKind::SparseStrided, strided_visible as fn(usize, usize, usize) -> bool),
        (PolicyKind::SparseFixed, fixed_visible),
    ] {
        let cfg = PolicyConfig::new(kind, 12).with_stride(4);
        let sim = run_policy(&t, &cfg).unwrap();
        let mut prev: Vec<usize> = vec![];
        for s in &sim.steps {
            if let Some(v) = s.evicted {
                let mut cand = prev.clone();
                cand.push(s.step);
                let off: Vec<usize> = cand.iter().copied().filter(|&c| !visible(s.step + 1, c, 4)).collect();
                match off.first() {
                    Some(&first) => assert_eq!(v, first, "{kind} step {}", s.step),
                    None => assert_eq!(v, cand[0]),
                }
            }
            prev = s.cached.clone();
        }
    }
}

#[test]
fn zero_self_score_changes_only_initial_scores() {
    let t = power_law(50, 6);
    let a = run_policy(&t, &PolicyConfig::new(PolicyKind::H2Only, 50)).unwrap();
    let b = run_policy(&t, &PolicyConfig::new(PolicyKind::H2Only, 50).with_self_score(SelfScoreInit::Zero)).unwrap();
    for i in 1..=50 {
        let own = exact_step(&t, i).unwrap().weight(i).unwrap();
        let diff = a.final_scores.get(i).unwrap() - b.final_scores.get(i).unwrap();
        assert!((diff - own).abs() < 1e-12);
    }
}

#[test]
fn quantized_keys_track_exact_attention() {
    let mut errs = Vec::new();
    for bits in [8u8, 4] {
        let mut total = 0.0;
        for seed in 0..4 {
            let t = power_law(120, seed);
            let plain = run_policy(&t, &PolicyConfig::new(PolicyKind::Local, 24)).unwrap();
            let q = QuantizationSpec::new(bits).unwrap();
            let quant = run_policy(&t, &PolicyConfig::new(PolicyKind::Local, 24).with_quantization(Some(q))).unwrap();
            for (a, b) in plain.steps.iter().zip(&quant.steps) {
                assert_eq!(a.cached, b.cached);
                total += a
                    .attention
                    .weights
                    .iter()
                    .zip(&b.attention.weights)
                    .map(|(x, y)| (x.1 - y.1).abs())
                    .sum::<f64>();
            }
        }
        errs.push(total);
    }
    assert!(errs[0] < errs[1], "{errs:?}");
}

#[test]
fn heavy_hitter_shares() {
    let t = power_law(128, 1);
    let p = heavy_hitter_profile(&full_accumulated_scores(&t));
    assert!(p.top10 > 0.5, "{}", p.top10);
    assert!(lift_profile(&t).top10 > 0.5);
    let sim = run_policy(&t, &PolicyConfig::new(PolicyKind::H2o, 25)).unwrap();
    let sp = simulation_profile(&sim);
    assert_eq!(sp.curve.len(), 25);
    assert!((sp.share(1.0) - 1.0).abs() < 1e-12);
}

#[test]
fn near_uniform_lift_share_is_about_ten_percent() {
    for seed in 0..10 {
        let t = generate_trace(&SyntheticTraceSpec::new(128, 16, TraceKind::UniformGaussian, seed)).unwrap();
        let q: Vec<f64> = t.queries().iter().map(|x| x * 0.1).collect();
        let t = AttentionTrace::new(128, 16, q, t.keys().to_vec()).unwrap();
        let share = lift_profile(&t).top10;
        assert!((share - 0.10).abs() <= 0.02, "{share}");
    }
}

#[test]
fn sparsity_aggregates_by_head_and_layer() {
    // one-hot rows: the query aligns with its own key only
    let n = 50;
    let mut q = vec![0.0; n * n];
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 40.0;
        k[i * n + i] = 1.0;
    }
    let a = AttentionTrace::new(n, n, q.clone(), k.clone()).unwrap().with_ids(Some(0), Some(0));
    let b = AttentionTrace::new(n, n, q, k).unwrap().with_ids(Some(1), Some(0));
    let rep = sparsity_report(&[&a, &b], 0.01).unwrap();
    let expect: f64 = (1..=n).map(|i| (i - 1) as f64 / i as f64).sum::<f64>() / n as f64;
    assert!((rep.mean_over_rows - expect).abs() < 1e-12);
    assert_eq!(rep.per_head.len(), 2);
    assert_eq!(rep.per_layer.len(), 1);
    assert!(rep.traces[0].rows.iter().all(|r| (0.0..=1.0).contains(r)));
}

#[test]
fn memory_ratio_at_twenty_percent() {
    for n in [100, 256, 1000] {
        let k = n / 5;
        let f = memory_footprint(&PolicyConfig::new(PolicyKind::H2o, k), n, 64, 16);
        assert!((f.ratio - 0.2).abs() <= 1.0 / n as f64);
        assert!(f.full_bytes / f.key_bytes >= 5.0);
    }
}
