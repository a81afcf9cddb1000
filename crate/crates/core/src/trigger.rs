//! Exploitation: flip a fetched value between two fetches and let the
//! target's oracle say whether that corrupted it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::dropit::TxResult;
use crate::error::{usage, Error, Result};
use crate::hw;
use crate::mem::{strlen, ArgRecord, ArgValue};
use crate::monitor::{watched_lines, DEFAULT_REARM_CYCLES};
use crate::sim::engine::{run_timed, AdversaryRunner, ProbeLoop, TimedActor, TimedStep};
use crate::sim::{derive_seed, Actor};
use crate::targets::{lookup, ParamKind, ParamSpec, TargetDescriptor, Verdict, MAX_CHECKS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MutationStrategy {
    SetZero,
    FlipLSB,
    Increment,
    RandomValue,
}

impl MutationStrategy {
    pub const ALL: [MutationStrategy; 4] = [
        MutationStrategy::SetZero,
        MutationStrategy::FlipLSB,
        MutationStrategy::Increment,
        MutationStrategy::RandomValue,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MutationStrategy::SetZero => "set_zero",
            MutationStrategy::FlipLSB => "flip_lsb",
            MutationStrategy::Increment => "increment",
            MutationStrategy::RandomValue => "random_value",
        }
    }
}

impl fmt::Display for MutationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MutationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| usage(format!("unknown strategy `{s}` (set_zero, flip_lsb, increment, random_value)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExploitMethod {
    /// Flip right after the first observed fetch.
    CacheTrigger,
    /// Toggle between the original and the mutated value as fast as possible.
    ValueFlipping,
    /// Sleep a tuned delay, then flip.
    BusyWait,
}

impl ExploitMethod {
    pub const ALL: [ExploitMethod; 3] =
        [ExploitMethod::CacheTrigger, ExploitMethod::BusyWait, ExploitMethod::ValueFlipping];

    pub fn as_str(self) -> &'static str {
        match self {
            ExploitMethod::CacheTrigger => "cache_trigger",
            ExploitMethod::ValueFlipping => "value_flipping",
            ExploitMethod::BusyWait => "busy_wait",
        }
    }
}

impl fmt::Display for ExploitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExploitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| usage(format!("unknown method `{s}` (cache_trigger, value_flipping, busy_wait)")))
    }
}

/// A parameter value as the mutation sees it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TypedValue {
    Int(u64),
    CString(Vec<u8>),
    Bytes(Vec<u8>),
}

impl TypedValue {
    /// Interprets the initial contents of parameter `spec`.
    pub fn of(spec: &ParamSpec, arg: &ArgValue) -> Result<Self> {
        match (spec.kind, arg) {
            (_, ArgValue::Value(v)) => Ok(TypedValue::Int(*v)),
            (ParamKind::IntScalar, ArgValue::Ref(b)) => {
                let mut raw = [0u8; 8];
                let n = b.len().min(8);
                raw[..n].copy_from_slice(&b[..n]);
                Ok(TypedValue::Int(u64::from_le_bytes(raw)))
            }
            (ParamKind::CString | ParamKind::FileNameLike, ArgValue::Ref(b)) => Ok(TypedValue::CString(b.clone())),
            (_, ArgValue::Ref(b)) => Ok(TypedValue::Bytes(b.clone())),
        }
    }

    /// Bytes to store into a buffer of `size` bytes.
    pub fn encode(&self, size: usize) -> Vec<u8> {
        match self {
            TypedValue::Int(v) => {
                let mut b = v.to_le_bytes().to_vec();
                b.resize(size.max(1), 0);
                b
            }
            TypedValue::CString(b) | TypedValue::Bytes(b) => b.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mutation {
    pub value: TypedValue,
    /// The mutation left the value unchanged.
    pub no_op: bool,
}

/// Applies `strategy`. Strings are mutated at their terminator, so FlipLSB
/// and RandomValue lengthen them and SetZero empties them.
pub fn mutate(value: &TypedValue, strategy: MutationStrategy, rng: &mut ChaCha8Rng) -> Result<Mutation> {
    use MutationStrategy::*;
    let out = match (value, strategy) {
        (TypedValue::Int(_), SetZero) => TypedValue::Int(0),
        (TypedValue::Int(v), FlipLSB) => TypedValue::Int(v ^ 1),
        (TypedValue::Int(v), Increment) => TypedValue::Int(v.wrapping_add(1)),
        (TypedValue::Int(v), RandomValue) => TypedValue::Int(loop {
            let r: u64 = rng.gen();
            if r != *v {
                break r;
            }
        }),
        (TypedValue::CString(_) | TypedValue::Bytes(_), Increment) => {
            return Err(usage("increment applies to integer parameters only"));
        }
        (TypedValue::CString(b), SetZero) => {
            let mut b = b.clone();
            if let Some(first) = b.first_mut() {
                *first = 0;
            }
            TypedValue::CString(b)
        }
        (TypedValue::CString(b), FlipLSB | RandomValue) => {
            let mut b = b.clone();
            let len = strlen(&b);
            if len < b.len() {
                b[len] = if strategy == FlipLSB { b[len] ^ 1 } else { rng.gen_range(1..=u8::MAX) };
            }
            TypedValue::CString(b)
        }
        (TypedValue::Bytes(b), SetZero) => TypedValue::Bytes(vec![0; b.len()]),
        (TypedValue::Bytes(b), FlipLSB) => {
            let mut b = b.clone();
            if let Some(first) = b.first_mut() {
                *first ^= 1;
            }
            TypedValue::Bytes(b)
        }
        (TypedValue::Bytes(b), RandomValue) => {
            let mut r = b.clone();
            while !b.is_empty() && r == *b {
                rng.fill(&mut r[..]);
            }
            TypedValue::Bytes(r)
        }
    };
    let no_op = out == *value;
    Ok(Mutation { value: out, no_op })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploitRequest {
    pub param: usize,
    pub strategy: MutationStrategy,
    pub method: ExploitMethod,
    /// CacheTrigger flips after this many observed fetches. Defaults to the
    /// declared fetch count of the parameter minus one.
    pub trigger_after: Option<usize>,
    /// BusyWait delay in ticks. Tuned when absent.
    pub busy_wait_delay: Option<u64>,
}

impl ExploitRequest {
    pub fn new(param: usize, strategy: MutationStrategy, method: ExploitMethod) -> Self {
        ExploitRequest { param, strategy, method, trigger_after: None, busy_wait_delay: None }
    }

    /// The target's exploit parameter and default strategy.
    pub fn for_target(target: &TargetDescriptor, method: ExploitMethod) -> Self {
        Self::new(target.exploit_param, target.default_strategy, method)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploitOutcome {
    pub triggered: bool,
    /// Writes the adversary made during the invocation.
    pub flips: usize,
    pub flip_vtime: Option<u64>,
    pub verdict: Verdict,
    /// Region outcome when the target is protected.
    pub tx: Option<TxResult>,
    pub strategy: MutationStrategy,
    pub method: ExploitMethod,
    /// The mutation did not change the value.
    pub no_op: bool,
    /// Seed of this run; RandomValue draws come from it.
    pub seed: u64,
}

fn trigger_after(target: &TargetDescriptor, req: &ExploitRequest) -> usize {
    req.trigger_after.unwrap_or_else(|| target.accesses_of(req.param).saturating_sub(1)).max(1)
}

/// Mutated and original bytes for `req.param`, and whether the mutation was a no-op.
pub fn payload(
    target: &TargetDescriptor,
    args: &ArgRecord,
    req: &ExploitRequest,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<u8>, Vec<u8>, bool)> {
    let spec = target.param(req.param)?;
    let arg = args.get(req.param).ok_or_else(|| usage(format!("{}: no argument {}", target.id, req.param)))?;
    let ArgValue::Ref(original) = arg else {
        return Err(usage(format!("{}: parameter {} is passed by value", target.id, req.param)));
    };
    let value = TypedValue::of(spec, arg)?;
    let m = mutate(&value, req.strategy, rng)?;
    Ok((m.value.encode(original.len()), original.clone(), m.no_op))
}

/// One exploitation attempt.
pub fn exploit_invoke(
    backend: &Backend,
    target: &TargetDescriptor,
    args: &ArgRecord,
    req: &ExploitRequest,
    seed: u64,
) -> Result<ExploitOutcome> {
    let mut req = req.clone();
    if req.method == ExploitMethod::BusyWait && req.busy_wait_delay.is_none() {
        req.busy_wait_delay = Some(tune_busy_wait(backend, target, &req, TUNE_RUNS, seed)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (bad, good, no_op) = payload(target, args, &req, &mut rng)?;
    let run_seed: u64 = rng.gen();
    let (inv, writes) = match backend {
        Backend::Hw { probe, profile } => {
            hw::exploit_invoke(probe, profile, target, args, &req, trigger_after(target, &req), &bad, &good)?
        }
        Backend::Sim { config, profile } => {
            let period = profile.fr_cycle_cost;
            let access = config.access_ticks;
            let after = trigger_after(target, &req);
            let (inv, run) = run_timed(config, target, args, run_seed, 0, u64::MAX, |shim, rng| {
                let buffer = shim.buffer(req.param)?;
                let runner = match req.method {
                    ExploitMethod::CacheTrigger => {
                        let lines = watched_lines(target, args, req.param, false, |p| {
                            Ok(shim.machine.shared(shim.buffer(p)?).line_ids().to_vec())
                        })?;
                        let probe = ProbeLoop::new(
                            lines,
                            period,
                            rng.gen_range(0..period),
                            DEFAULT_REARM_CYCLES,
                            config.noise_ticks,
                            Actor::Trigger,
                            0,
                        );
                        let step = TimedStep::FlipOnHit { buffer, offset: 0, bytes: bad.clone(), after, probe };
                        AdversaryRunner::new(vec![step], false, 0, Actor::Trigger, access)
                    }
                    ExploitMethod::ValueFlipping => {
                        let steps = vec![
                            TimedStep::Write { buffer, offset: 0, bytes: bad.clone() },
                            TimedStep::Write { buffer, offset: 0, bytes: good.clone() },
                        ];
                        AdversaryRunner::new(steps, true, rng.gen_range(0..2), Actor::Adversary, access)
                    }
                    ExploitMethod::BusyWait => {
                        let steps = vec![
                            TimedStep::Wait(req.busy_wait_delay.unwrap_or(0)),
                            TimedStep::Write { buffer, offset: 0, bytes: bad.clone() },
                        ];
                        AdversaryRunner::new(steps, false, 0, Actor::Adversary, access)
                    }
                };
                Ok(vec![TimedActor::Adversary(runner)])
            })?;
            let writes = match &run.actors[0] {
                TimedActor::Adversary(a) => a.writes.clone(),
                TimedActor::Monitor(_) => Vec::new(),
            };
            (inv, writes)
        }
    };
    Ok(ExploitOutcome {
        triggered: !writes.is_empty(),
        flips: writes.len(),
        flip_vtime: writes.first().copied(),
        verdict: inv.verdict,
        tx: inv.tx,
        strategy: req.strategy,
        method: req.method,
        no_op,
        seed,
    })
}

/// Tuning runs per candidate delay.
pub const TUNE_RUNS: usize = 50;

/// Picks the BusyWait delay: candidate timeouts 0, c, 2c, ... up to past the
/// target's last declared access, each tried `runs` times on fresh
/// arguments; the delay with the most corruptions wins, the earliest on ties.
pub fn tune_busy_wait(
    backend: &Backend,
    target: &TargetDescriptor,
    req: &ExploitRequest,
    runs: usize,
    seed: u64,
) -> Result<u64> {
    let step = match backend {
        Backend::Sim { .. } => backend.fr_cycle_cost(),
        Backend::Hw { .. } => hw::TICKS_PER_FR_CYCLE,
    }
    .max(1);
    let t = &target.timing;
    let span: u64 = target.access_script().iter().map(|s| s.gap).sum();
    let horizon = 1 + t.lead + t.entry_spread + span + step;
    let mut best = (0usize, 0u64);
    let mut k = 0u64;
    let mut delay = 0u64;
    while delay <= horizon {
        let mut wins = 0;
        for i in 0..runs {
            let s = derive_seed(seed ^ 0x5eed_0000, k * runs as u64 + i as u64);
            let args = target.args(s);
            let r = ExploitRequest { busy_wait_delay: Some(delay), ..req.clone() };
            if exploit_invoke(backend, target, &args, &r, s)?.verdict == Verdict::Corrupted {
                wins += 1;
            }
        }
        if wins > best.0 {
            best = (wins, delay);
        }
        k += 1;
        delay += step;
    }
    Ok(best.1)
}

/// Outcomes of `trials` attempts, each on freshly generated arguments.
/// BusyWait is tuned once up front.
pub fn exploit_trials(
    backend: &Backend,
    target: &TargetDescriptor,
    req: &ExploitRequest,
    trials: usize,
    seed: u64,
) -> Result<Vec<ExploitOutcome>> {
    let mut req = req.clone();
    if req.method == ExploitMethod::BusyWait && req.busy_wait_delay.is_none() {
        req.busy_wait_delay = Some(tune_busy_wait(backend, target, &req, TUNE_RUNS, seed)?);
    }
    (0..trials)
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            exploit_invoke(backend, target, &target.args(s), &req, s)
        })
        .collect()
}

/// Fraction of attempts the target reports as corrupted.
pub fn success_rate(
    backend: &Backend,
    target: &TargetDescriptor,
    req: &ExploitRequest,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials < 100 {
        return Err(usage("success_rate needs at least 100 trials"));
    }
    let outcomes = exploit_trials(backend, target, req, trials, seed)?;
    Ok(corrupted_fraction(&outcomes))
}

pub fn corrupted_fraction(outcomes: &[ExploitOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| o.verdict == Verdict::Corrupted).count() as f64 / outcomes.len() as f64
}

/// Success probability of `method` on `multi_check_n` for each `n` in `ns`.
pub fn multi_check_success(
    backend: &Backend,
    method: ExploitMethod,
    ns: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    ns.iter()
        .map(|&n| {
            if !(1..=MAX_CHECKS).contains(&n) {
                return Err(usage(format!("n_checks must be in 1..={MAX_CHECKS}")));
            }
            let target = lookup(&format!("multi_check_{n}"))?;
            let req = ExploitRequest::for_target(&target, method);
            Ok((n, success_rate(backend, &target, &req, trials, derive_seed(seed, n as u64))?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimConfig;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn integer_mutations() {
        let m = |s| mutate(&TypedValue::Int(5), s, &mut rng()).unwrap().value;
        assert_eq!(m(MutationStrategy::FlipLSB), TypedValue::Int(4));
        assert_eq!(m(MutationStrategy::Increment), TypedValue::Int(6));
        assert_eq!(m(MutationStrategy::SetZero), TypedValue::Int(0));
        assert_ne!(m(MutationStrategy::RandomValue), TypedValue::Int(5));
    }

    #[test]
    fn set_zero_on_zero_is_flagged() {
        let m = mutate(&TypedValue::Int(0), MutationStrategy::SetZero, &mut rng()).unwrap();
        assert!(m.no_op);
    }

    #[test]
    fn increment_on_string_is_usage_error() {
        let r = mutate(&TypedValue::CString(b"ab\0".to_vec()), MutationStrategy::Increment, &mut rng());
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn string_mutations_act_on_the_terminator() {
        let s = TypedValue::CString(b"ab\0AAAA".to_vec());
        let flip = mutate(&s, MutationStrategy::FlipLSB, &mut rng()).unwrap().value;
        assert_eq!(flip, TypedValue::CString(b"ab\x01AAAA".to_vec()));
        let zero = mutate(&s, MutationStrategy::SetZero, &mut rng()).unwrap().value;
        assert_eq!(zero, TypedValue::CString(b"\0b\0AAAA".to_vec()));
        let TypedValue::CString(r) = mutate(&s, MutationStrategy::RandomValue, &mut rng()).unwrap().value else {
            panic!()
        };
        assert_ne!(r[2], 0);
    }

    #[test]
    fn names_parse() {
        for m in ExploitMethod::ALL {
            assert_eq!(m.as_str().parse::<ExploitMethod>().unwrap(), m);
        }
        for s in MutationStrategy::ALL {
            assert_eq!(s.as_str().parse::<MutationStrategy>().unwrap(), s);
        }
    }

    #[test]
    fn cache_trigger_flips_once_and_corrupts_strcpy() {
        let b = Backend::sim(SimConfig::with_seed(1)).unwrap();
        let t = lookup("naive_strcpy").unwrap();
        let req = ExploitRequest::new(0, MutationStrategy::FlipLSB, ExploitMethod::CacheTrigger);
        let o = exploit_invoke(&b, &t, &t.args(3), &req, 3).unwrap();
        assert!(o.triggered);
        assert_eq!(o.verdict, Verdict::Corrupted);
    }

    #[test]
    fn by_value_param_is_usage_error() {
        let b = Backend::sim(SimConfig::with_seed(1)).unwrap();
        let t = lookup("multi_check_1").unwrap();
        let req = ExploitRequest::new(1, MutationStrategy::Increment, ExploitMethod::CacheTrigger);
        assert!(matches!(exploit_invoke(&b, &t, &t.args(1), &req, 1), Err(Error::Usage(_))));
    }
}
