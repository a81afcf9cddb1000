mod common;

use common::sim_config;
use dfscope_core::targets::lookup;
use dfscope_core::{
    detection_probability, is_double_fetch, monitor_invoke, success_rate, Backend, ExploitMethod, ExploitRequest,
    MonitorConfig,
};

fn sim() -> Backend {
    Backend::sim(sim_config()).unwrap()
}

#[test]
fn single_fetch_is_never_flagged() {
    let b = sim();
    let t = lookup("single_fetch").unwrap();
    let cfg = MonitorConfig::all_params(&t, b.profile());
    for seed in 0..1000 {
        let r = monitor_invoke(&b, &t, &t.args(seed), &cfg, seed).unwrap();
        for &p in &cfg.params_to_watch {
            assert!(!is_double_fetch(&r, p), "seed {seed}");
        }
        assert_eq!(r.param(0).unwrap().fetch_count, 1, "seed {seed}");
    }
}

#[test]
fn inout_buffer_looks_like_a_double_fetch() {
    let b = sim();
    let t = lookup("inout_buffer").unwrap();
    let cfg = MonitorConfig::all_params(&t, b.profile());
    for seed in 0..100 {
        let r = monitor_invoke(&b, &t, &t.args(seed), &cfg, seed).unwrap();
        assert!(is_double_fetch(&r, 0), "seed {seed}");
    }
}

#[test]
fn filename_cache_is_counted_per_fetch() {
    let b = sim();
    let t = lookup("filename_cache").unwrap();
    let cfg = MonitorConfig::all_params(&t, b.profile());
    let r = monitor_invoke(&b, &t, &t.args(1), &cfg, 1).unwrap();
    assert!(is_double_fetch(&r, 0));
    assert!(r.param(0).unwrap().fetch_count <= t.accesses_of(0));
}

// Reload re-arms for two probe cycles after a hit, so three cycles is the
// smallest gap that is always seen.
#[test]
fn gaps_of_three_probe_cycles_are_always_detected() {
    let b = sim();
    let c = b.fr_cycle_cost();
    for gap in (3 * c..=12 * c).step_by(c as usize) {
        assert_eq!(detection_probability(&b, gap, 500, gap).unwrap(), 1.0, "gap {gap}");
    }
}

#[test]
fn detection_is_monotone_in_the_gap() {
    let b = sim();
    let c = b.fr_cycle_cost();
    let curve: Vec<f64> = (0..=6 * c).map(|g| detection_probability(&b, g, 10_000, 7).unwrap()).collect();
    for (i, w) in curve.windows(2).enumerate() {
        assert!(w[0] <= w[1] + 0.02, "gap {i}: {curve:?}");
    }
    assert!(curve[..2 * c as usize].iter().all(|&p| p < 0.05), "{curve:?}");
}

#[test]
fn some_gap_is_exploitable_below_detection() {
    let b = sim();
    let c = b.fr_cycle_cost();
    let base = lookup("dedupe_analog").unwrap();
    let found = (1..=4 * c).any(|gap| {
        let detect = detection_probability(&b, gap, 1000, gap).unwrap();
        if detect >= 0.5 {
            return false;
        }
        let t = base.with_gap(gap);
        let req = ExploitRequest::for_target(&t, ExploitMethod::CacheTrigger);
        success_rate(&b, &t, &req, 1000, gap).unwrap() > 0.5
    });
    assert!(found);
}

#[test]
fn watching_a_value_parameter_is_a_usage_error() {
    let b = sim();
    let t = lookup("dedupe_analog").unwrap();
    let args = t.args(1);
    let Some(p) = (0..args.values.len()).find(|&i| !t.ref_params().contains(&i)) else { return };
    let cfg = MonitorConfig::new(vec![p], b.profile());
    assert!(matches!(monitor_invoke(&b, &t, &args, &cfg, 1), Err(dfscope_core::Error::Usage(_))));
}

#[test]
fn probe_period_below_the_cycle_cost_is_rejected() {
    let b = sim();
    let t = lookup("two_fetch").unwrap();
    let mut cfg = MonitorConfig::all_params(&t, b.profile());
    cfg.probe_period = b.fr_cycle_cost() - 1;
    assert!(matches!(monitor_invoke(&b, &t, &t.args(1), &cfg, 1), Err(dfscope_core::Error::Config(_))));
}
