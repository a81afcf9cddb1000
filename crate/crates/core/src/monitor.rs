//! Fetch counting: one Flush+Reload loop per watched parameter while the
//! target runs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{usage, Error, Result};
use crate::hw;
use crate::mem::{ArgRecord, ArgValue};
use crate::probe::{CalibrationProfile, LineId};
use crate::sim::engine::{run_timed, ProbeLoop, TimedActor};
use crate::sim::{derive_seed, Actor};
use crate::targets::{lookup, Invocation, TargetDescriptor};

/// Probe cycles after a counted hit during which further hits are ignored.
/// Each reload re-caches the line, so the loop waits this long before the
/// next flush epoch starts.
pub const DEFAULT_REARM_CYCLES: u32 = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub params_to_watch: Vec<usize>,
    /// Ticks (sim) or cycles (hw) between reloads.
    pub probe_period: u64,
    /// Probing stops this long after the invocation starts.
    pub max_duration: u64,
    pub rearm_cycles: u32,
    /// Watch every line of a parameter instead of only the first.
    pub monitor_all_lines: bool,
}

impl MonitorConfig {
    /// Probes as fast as the profile allows.
    pub fn new(params_to_watch: Vec<usize>, profile: &CalibrationProfile) -> Self {
        MonitorConfig {
            params_to_watch,
            probe_period: profile.fr_cycle_cost,
            max_duration: u64::MAX,
            rearm_cycles: DEFAULT_REARM_CYCLES,
            monitor_all_lines: false,
        }
    }

    /// Watches every reference parameter of `target`.
    pub fn all_params(target: &TargetDescriptor, profile: &CalibrationProfile) -> Self {
        Self::new(target.ref_params(), profile)
    }

    pub fn validate(&self, profile: &CalibrationProfile) -> Result<()> {
        if self.probe_period < profile.fr_cycle_cost {
            return Err(Error::Config(format!(
                "probe period {} is below the flush+reload cost {}",
                self.probe_period, profile.fr_cycle_cost
            )));
        }
        if self.params_to_watch.is_empty() {
            return Err(usage("no parameters to watch"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub param: usize,
    pub hit_timestamps: Vec<u64>,
    pub fetch_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorReport {
    pub target: String,
    pub per_param: Vec<ParamReport>,
    pub invocation: Invocation,
}

/// JSON record of one watched parameter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub target: String,
    pub param: usize,
    pub fetch_count: usize,
    pub hits: Vec<u64>,
    pub result: String,
}

impl MonitorReport {
    pub fn param(&self, param: usize) -> Option<&ParamReport> {
        self.per_param.iter().find(|p| p.param == param)
    }

    pub fn records(&self) -> Vec<ParamRecord> {
        self.per_param
            .iter()
            .map(|p| ParamRecord {
                target: self.target.clone(),
                param: p.param,
                fetch_count: p.fetch_count,
                hits: p.hit_timestamps.clone(),
                result: self.invocation.verdict.as_str().to_string(),
            })
            .collect()
    }
}

/// True iff `param` was fetched at least twice. A parameter missing from the
/// report counts as not fetched.
pub fn is_double_fetch(report: &MonitorReport, param: usize) -> bool {
    report.param(param).is_some_and(|p| p.fetch_count >= 2)
}

pub(crate) fn watched_lines(
    target: &TargetDescriptor,
    args: &ArgRecord,
    param: usize,
    all_lines: bool,
    lines_of: impl Fn(usize) -> Result<Vec<LineId>>,
) -> Result<Vec<LineId>> {
    match args.get(param) {
        Some(ArgValue::Ref(_)) => {}
        Some(ArgValue::Value(_)) => {
            return Err(usage(format!("{}: parameter {param} is passed by value and cannot be probed", target.id)))
        }
        None => return Err(usage(format!("{}: no parameter {param}", target.id))),
    }
    let lines = lines_of(param)?;
    Ok(if all_lines { lines } else { lines.into_iter().take(1).collect() })
}

/// Invokes `target` once with `args` while probing the watched parameters.
pub fn monitor_invoke(
    backend: &Backend,
    target: &TargetDescriptor,
    args: &ArgRecord,
    cfg: &MonitorConfig,
    seed: u64,
) -> Result<MonitorReport> {
    cfg.validate(backend.profile())?;
    match backend {
        Backend::Hw { probe, profile } => hw::monitor_invoke(probe, profile, target, args, cfg),
        Backend::Sim { config, .. } => {
            let drain = 2 * cfg.probe_period * (u64::from(cfg.rearm_cycles) + 1);
            let (invocation, run) = run_timed(config, target, args, seed, drain, cfg.max_duration, |shim, rng| {
                let mut actors = Vec::with_capacity(cfg.params_to_watch.len());
                for &param in &cfg.params_to_watch {
                    let lines = watched_lines(target, args, param, cfg.monitor_all_lines, |p| {
                        Ok(shim.machine.shared(shim.buffer(p)?).line_ids().to_vec())
                    })?;
                    let phase = rng.gen_range(0..cfg.probe_period);
                    actors.push(TimedActor::Monitor(ProbeLoop::new(
                        lines,
                        cfg.probe_period,
                        phase,
                        cfg.rearm_cycles,
                        config.noise_ticks,
                        Actor::Monitor,
                        0,
                    )));
                }
                Ok(actors)
            })?;
            let per_param = cfg
                .params_to_watch
                .iter()
                .zip(&run.actors)
                .map(|(&param, actor)| {
                    let TimedActor::Monitor(p) = actor else { unreachable!("only monitors were added") };
                    ParamReport { param, hit_timestamps: p.hits.clone(), fetch_count: p.hits.len() }
                })
                .collect();
            Ok(MonitorReport { target: target.id.clone(), per_param, invocation })
        }
    }
}

/// Fraction of `trials` runs of the two-access fixture, with accesses `gap`
/// ticks apart, in which the monitor sees both.
pub fn detection_probability(backend: &Backend, gap: u64, trials: usize, seed: u64) -> Result<f64> {
    detection_probability_of(backend, &lookup("two_fetch")?, 0, gap, trials, seed)
}

/// Like [`detection_probability`] for any target whose inter-access gap can
/// be set, watching `param`.
pub fn detection_probability_of(
    backend: &Backend,
    target: &TargetDescriptor,
    param: usize,
    gap: u64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials == 0 {
        return Err(usage("trials must be at least 1"));
    }
    let target = target.with_gap(gap);
    let cfg = MonitorConfig::new(vec![param], backend.profile());
    let mut detected = 0usize;
    for i in 0..trials {
        let s = derive_seed(seed, i as u64);
        let args = target.args(s);
        if is_double_fetch(&monitor_invoke(backend, &target, &args, &cfg, s)?, param) {
            detected += 1;
        }
    }
    Ok(detected as f64 / trials as f64)
}
