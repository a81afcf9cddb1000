//! Order-only execution: adversary steps are inserted between the target's
//! accesses, ignoring time. Every legal insertion can be enumerated, or
//! sampled uniformly when there are too many.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dropit::{AbortCause, TxBackend, TxResult};
use crate::error::{usage, Result};
use crate::mem::{ArgRecord, Memory};
use crate::probe::LineId;
use crate::targets::{TargetDescriptor, Verdict};

use super::shim::SimShim;
use super::{AccessEvent, Actor, BufferId, SimConfig};

/// One step of an adversary program.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryStep {
    /// Idle for `k` ticks. Only meaningful on a timed run.
    Wait(u64),
    Write {
        param: usize,
        offset: usize,
        bytes: Vec<u8>,
    },
    /// Probe the parameter's line and write once the `after`-th fetch has
    /// been seen. In order-only mode this is a write that may only be placed
    /// after the target's first access.
    FlipOnHit {
        param: usize,
        offset: usize,
        bytes: Vec<u8>,
        after: usize,
    },
}

impl AdversaryStep {
    fn is_wait(&self) -> bool {
        matches!(self, AdversaryStep::Wait(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryProgram {
    pub steps: Vec<AdversaryStep>,
    /// Restart from the first step after the last one.
    pub repeat: bool,
}

impl AdversaryProgram {
    /// One write of `bytes`.
    pub fn single_flip(param: usize, offset: usize, bytes: Vec<u8>) -> Self {
        AdversaryProgram { steps: vec![AdversaryStep::Write { param, offset, bytes }], repeat: false }
    }

    /// Alternates between `bad` and `good` forever.
    pub fn persistent(param: usize, offset: usize, bad: Vec<u8>, good: Vec<u8>) -> Self {
        AdversaryProgram {
            steps: vec![
                AdversaryStep::Write { param, offset, bytes: bad },
                AdversaryStep::Write { param, offset, bytes: good },
            ],
            repeat: true,
        }
    }

    /// The steps that take part in order-only execution. Waits are dropped;
    /// a repeating program is unrolled to at least `min_len` steps.
    pub fn ordered(&self, min_len: usize) -> Vec<AdversaryStep> {
        let once: Vec<AdversaryStep> = self.steps.iter().filter(|s| !s.is_wait()).cloned().collect();
        if !self.repeat || once.is_empty() {
            return once;
        }
        let mut out = Vec::new();
        while out.len() < min_len.max(once.len()) {
            out.extend(once.iter().cloned());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleActor {
    Target,
    Adversary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub actor: ScheduleActor,
    pub step: usize,
}

/// Total order of target and adversary steps. Serialises as a JSON array.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule {
    pub entries: Vec<ScheduleEntry>,
}

impl Schedule {
    /// Builds the schedule that places adversary step `i` right before target
    /// step `positions[i]` (`target_steps` meaning after the last one).
    pub fn from_positions(positions: &[usize], target_steps: usize) -> Self {
        let mut entries = Vec::with_capacity(positions.len() + target_steps);
        let mut k = 0;
        for t in 0..=target_steps {
            while k < positions.len() && positions[k] == t {
                entries.push(ScheduleEntry { actor: ScheduleActor::Adversary, step: k });
                k += 1;
            }
            if t < target_steps {
                entries.push(ScheduleEntry { actor: ScheduleActor::Target, step: t });
            }
        }
        Schedule { entries }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("schedule serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| usage(format!("bad schedule: {e}")))
    }
}

/// Result of one order-only run.
#[derive(Clone, Debug)]
pub struct ScheduleRun {
    /// The order actually executed, including target steps beyond the
    /// nominal count (retries) and adversary steps left over at return.
    pub schedule: Schedule,
    pub verdict: Verdict,
    pub tx: Option<TxResult>,
    pub log: Vec<AccessEvent>,
    /// What each executed target step did, indexed by target step.
    pub target_ops: Vec<TargetOp>,
}

/// One target step of an order-only run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetOp {
    Read { lines: Vec<LineId> },
    Write { lines: Vec<LineId> },
    Commit { committed: bool },
}

#[derive(Clone, Debug)]
pub struct InterleavingReport {
    /// Target accesses in an undisturbed run.
    pub target_steps: usize,
    pub adversary_steps: usize,
    /// Number of legal interleavings.
    pub total: u128,
    /// True when `runs` is a uniform sample rather than the full set.
    pub sampled: bool,
    pub runs: Vec<ScheduleRun>,
}

impl InterleavingReport {
    pub fn count(&self, verdict: Verdict) -> usize {
        self.runs.iter().filter(|r| r.verdict == verdict).count()
    }
}

#[derive(Clone, Debug)]
struct Resolved {
    buffer: BufferId,
    offset: usize,
    bytes: Vec<u8>,
    after_first_access: bool,
}

pub(crate) struct ScheduledRun {
    shim: SimShim,
    steps: Vec<Resolved>,
    queue: VecDeque<ScheduleEntry>,
    executed: Vec<ScheduleEntry>,
    target_steps: usize,
    ops: Vec<TargetOp>,
}

impl ScheduledRun {
    fn new(config: &SimConfig, args: &ArgRecord, steps: &[AdversaryStep], schedule: &Schedule) -> Result<Self> {
        let shim = SimShim::new(config.clone(), args)?;
        let mut resolved = Vec::with_capacity(steps.len());
        for step in steps {
            let (param, offset, bytes, after_first_access) = match step {
                AdversaryStep::Write { param, offset, bytes } => (*param, *offset, bytes.clone(), false),
                AdversaryStep::FlipOnHit { param, offset, bytes, .. } => (*param, *offset, bytes.clone(), true),
                AdversaryStep::Wait(_) => return Err(usage("order-only programs contain no waits")),
            };
            resolved.push(Resolved { buffer: shim.buffer(param)?, offset, bytes, after_first_access });
        }
        let mut seen = vec![false; resolved.len()];
        let mut target_seen = false;
        for e in &schedule.entries {
            match e.actor {
                ScheduleActor::Target => target_seen = true,
                ScheduleActor::Adversary => {
                    let Some(r) = resolved.get(e.step) else {
                        return Err(usage(format!("schedule names adversary step {} of {}", e.step, resolved.len())));
                    };
                    if seen[e.step] {
                        return Err(usage(format!("adversary step {} scheduled twice", e.step)));
                    }
                    if r.after_first_access && !target_seen {
                        return Err(usage("flip-on-hit step placed before the target's first access"));
                    }
                    seen[e.step] = true;
                }
            }
        }
        // Steps the schedule does not mention run after the target returns.
        let mut queue: VecDeque<ScheduleEntry> = schedule.entries.iter().copied().collect();
        for (i, s) in seen.iter().enumerate() {
            if !s {
                queue.push_back(ScheduleEntry { actor: ScheduleActor::Adversary, step: i });
            }
        }
        Ok(ScheduledRun { shim, steps: resolved, queue, executed: Vec::new(), target_steps: 0, ops: Vec::new() })
    }

    fn run_adversary(&mut self, step: usize) {
        let r = &self.steps[step];
        let now = self.shim.machine.now();
        self.shim.machine.write(r.buffer, r.offset, &r.bytes, Actor::Adversary, now);
        self.executed.push(ScheduleEntry { actor: ScheduleActor::Adversary, step });
    }

    /// Runs adversary entries up to the next target entry, then books the
    /// target step.
    fn target_step(&mut self) {
        while let Some(e) = self.queue.pop_front() {
            match e.actor {
                ScheduleActor::Target => break,
                ScheduleActor::Adversary => self.run_adversary(e.step),
            }
        }
        self.executed.push(ScheduleEntry { actor: ScheduleActor::Target, step: self.target_steps });
        self.target_steps += 1;
    }

    fn lines(&self, param: usize, offset: usize, len: usize) -> Vec<LineId> {
        let id = self.shim.buffer(param).expect("targets only access reference parameters");
        self.shim.machine.shared(id).lines_in(offset, len).to_vec()
    }

    fn finish(mut self) -> (Schedule, Vec<AccessEvent>, Vec<TargetOp>) {
        while let Some(e) = self.queue.pop_front() {
            if e.actor == ScheduleActor::Adversary {
                self.run_adversary(e.step);
            }
        }
        (Schedule { entries: self.executed }, self.shim.machine.into_log(), self.ops)
    }
}

impl Memory for ScheduledRun {
    fn read(&mut self, param: usize, offset: usize, len: usize) -> Vec<u8> {
        self.target_step();
        let lines = self.lines(param, offset, len);
        self.ops.push(TargetOp::Read { lines });
        let now = self.shim.machine.now();
        self.shim.read(param, offset, len, now)
    }

    fn write(&mut self, param: usize, offset: usize, bytes: &[u8]) {
        self.target_step();
        let lines = self.lines(param, offset, bytes.len());
        self.ops.push(TargetOp::Write { lines });
        let now = self.shim.machine.now();
        self.shim.write(param, offset, bytes, now);
    }

    fn pause(&mut self, _ticks: u64) {}

    fn scalar(&self, param: usize) -> u64 {
        self.shim.scalar(param)
    }

    fn param_len(&self, param: usize) -> usize {
        self.shim.param_len(param)
    }

    fn tx_begin(&mut self, backend: TxBackend) -> Result<()> {
        self.shim.begin(backend)
    }

    fn tx_commit(&mut self) -> std::result::Result<(), AbortCause> {
        self.target_step();
        let now = self.shim.machine.now();
        let r = self.shim.commit(now);
        self.ops.push(TargetOp::Commit { committed: r.is_ok() });
        r
    }

    fn tx_abort(&mut self) {
        self.shim.abort();
    }

    fn in_tx(&self) -> bool {
        self.shim.in_tx()
    }
}

/// Replays `schedule` and returns the executed order and verdict.
pub fn replay(
    target: &TargetDescriptor,
    args: &ArgRecord,
    steps: &[AdversaryStep],
    schedule: &Schedule,
    config: &SimConfig,
) -> Result<ScheduleRun> {
    let mut run = ScheduledRun::new(config, args, steps, schedule)?;
    let inv = target.invoke(&mut run)?;
    let (schedule, log, target_ops) = run.finish();
    Ok(ScheduleRun { schedule, verdict: inv.verdict, tx: inv.tx, log, target_ops })
}

/// Number of target accesses in an undisturbed order-only run.
pub fn target_step_count(target: &TargetDescriptor, args: &ArgRecord, config: &SimConfig) -> Result<usize> {
    let mut run = ScheduledRun::new(config, args, &[], &Schedule::default())?;
    target.invoke(&mut run)?;
    Ok(run.target_steps)
}

/// Counting table for non-decreasing position sequences. `suffix[i][v]` is
/// the number of ways to place steps `i..` given that step `i - 1` sits at
/// `v`.
struct Placements {
    lower: Vec<usize>,
    slots: usize,
    suffix: Vec<Vec<u128>>,
}

impl Placements {
    fn new(steps: &[AdversaryStep], target_steps: usize) -> Self {
        let a = steps.len();
        let slots = target_steps + 1;
        let lower: Vec<usize> =
            steps.iter().map(|s| usize::from(matches!(s, AdversaryStep::FlipOnHit { .. }))).collect();
        let mut suffix = vec![vec![0u128; slots]; a + 1];
        suffix[a] = vec![1; slots];
        for i in (0..a).rev() {
            let mut tail = vec![0u128; slots + 1];
            for w in (0..slots).rev() {
                tail[w] = tail[w + 1].saturating_add(suffix[i + 1][w]);
            }
            for v in 0..slots {
                suffix[i][v] = tail[v.max(lower[i]).min(slots)];
            }
        }
        Placements { lower, slots, suffix }
    }

    fn total(&self) -> u128 {
        self.suffix[0][0]
    }

    fn visit(&self, i: usize, prev: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == self.lower.len() {
            out.push(current.clone());
            return;
        }
        for w in prev.max(self.lower[i])..self.slots {
            current.push(w);
            self.visit(i + 1, w, current, out);
            current.pop();
        }
    }

    fn all(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        self.visit(0, 0, &mut Vec::new(), &mut out);
        out
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.lower.len());
        let mut prev = 0;
        for i in 0..self.lower.len() {
            let mut r = rng.gen_range(0..self.suffix[i][prev]);
            let mut pick = self.slots - 1;
            for w in prev.max(self.lower[i])..self.slots {
                let c = self.suffix[i + 1][w];
                if r < c {
                    pick = w;
                    break;
                }
                r -= c;
            }
            out.push(pick);
            prev = pick;
        }
        out
    }
}

/// Number of legal interleavings of `steps` into `target_steps` accesses.
pub fn interleaving_count(steps: &[AdversaryStep], target_steps: usize) -> u128 {
    Placements::new(steps, target_steps).total()
}

/// Runs `target` under every legal interleaving of `adversary`'s steps into
/// its accesses, or under `max_schedules` uniform samples when there are more
/// than that. A repeating program is unrolled to four writes per target
/// access.
pub fn run_interleavings(
    target: &TargetDescriptor,
    args: &ArgRecord,
    adversary: &AdversaryProgram,
    max_schedules: usize,
    config: &SimConfig,
) -> Result<InterleavingReport> {
    let t = target_step_count(target, args, config)?;
    let steps = adversary.ordered(4 * (t + 1));
    let table = Placements::new(&steps, t);
    let total = table.total();
    if total <= max_schedules as u128 {
        let runs = table
            .all()
            .iter()
            .map(|p| replay(target, args, &steps, &Schedule::from_positions(p, t), config))
            .collect::<Result<Vec<_>>>()?;
        return Ok(InterleavingReport { target_steps: t, adversary_steps: steps.len(), total, sampled: false, runs });
    }
    sample_with(target, args, &steps, t, max_schedules, config)
}

/// `n` uniformly sampled interleavings, regardless of how many exist.
pub fn sample_interleavings(
    target: &TargetDescriptor,
    args: &ArgRecord,
    adversary: &AdversaryProgram,
    n: usize,
    config: &SimConfig,
) -> Result<InterleavingReport> {
    let t = target_step_count(target, args, config)?;
    let steps = adversary.ordered(4 * (t + 1));
    sample_with(target, args, &steps, t, n, config)
}

fn sample_with(
    target: &TargetDescriptor,
    args: &ArgRecord,
    steps: &[AdversaryStep],
    t: usize,
    n: usize,
    config: &SimConfig,
) -> Result<InterleavingReport> {
    let table = Placements::new(steps, t);
    let total = table.total();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut runs = Vec::with_capacity(n);
    if total > 0 {
        for _ in 0..n {
            let p = table.sample(&mut rng);
            runs.push(replay(target, args, steps, &Schedule::from_positions(&p, t), config)?);
        }
    }
    Ok(InterleavingReport { target_steps: t, adversary_steps: steps.len(), total, sampled: true, runs })
}
