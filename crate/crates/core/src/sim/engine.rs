//! Timed runs: the target executes ordinary Rust code against [`TimedRun`],
//! and before each of its accesses every other actor whose next event is due
//! earlier gets to run. Ties go to the target.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dropit::{AbortCause, TxBackend};
use crate::error::Result;
use crate::mem::{ArgRecord, Memory};
use crate::probe::{Classification, EpochCounter, LineId};
use crate::targets::{Invocation, TargetDescriptor};

use super::shim::SimShim;
use super::{Actor, BufferId, Machine, SimConfig};

/// Flush+Reload loop over a set of lines with a fixed period. Hits are
/// de-duplicated by an [`EpochCounter`].
#[derive(Clone, Debug)]
pub(crate) struct ProbeLoop {
    lines: Vec<LineId>,
    period: u64,
    phase: u64,
    noise: u64,
    actor: Actor,
    next: u64,
    armed: bool,
    epochs: EpochCounter,
    pub hits: Vec<u64>,
}

impl ProbeLoop {
    pub fn new(
        lines: Vec<LineId>,
        period: u64,
        phase: u64,
        rearm_cycles: u32,
        noise: u64,
        actor: Actor,
        start: u64,
    ) -> Self {
        ProbeLoop {
            lines,
            period: period.max(1),
            phase,
            noise,
            actor,
            next: start,
            armed: false,
            epochs: EpochCounter::new(rearm_cycles),
            hits: Vec::new(),
        }
    }

    pub fn wake(&self) -> u64 {
        self.next
    }

    fn flush_all(&self, m: &mut Machine) {
        for &line in &self.lines {
            m.flush(line, self.actor, m.now()).expect("watched lines are registered");
        }
    }

    /// Runs one cycle. Returns the timestamp of a newly counted hit.
    pub fn cycle(&mut self, m: &mut Machine, rng: &mut ChaCha8Rng) -> Option<u64> {
        if !self.armed {
            let at = self.next;
            for &line in &self.lines {
                m.flush(line, self.actor, at).expect("watched lines are registered");
            }
            self.armed = true;
            self.next = at + self.phase + self.period;
            return None;
        }
        let at = self.next;
        let mut hit_at = None;
        for &line in &self.lines {
            let s = m.reload(line, self.actor, at).expect("watched lines are registered");
            if s.classification == Classification::Hit && hit_at.is_none() {
                hit_at = Some(s.timestamp);
            }
        }
        let step = self.epochs.observe(hit_at.is_some());
        if step.flush {
            self.flush_all(m);
        }
        let counted = if step.counted { hit_at } else { None };
        if let Some(t) = counted {
            self.hits.push(t);
        }
        self.next += self.period;
        if self.noise > 0 {
            self.next += rng.gen_range(0..=self.noise);
        }
        counted
    }
}

/// One step of a timed adversary program.
#[derive(Clone, Debug)]
pub(crate) enum TimedStep {
    Wait(u64),
    Write {
        buffer: BufferId,
        offset: usize,
        bytes: Vec<u8>,
    },
    /// Probe `lines` and write once the `after`-th distinct fetch is seen.
    FlipOnHit {
        buffer: BufferId,
        offset: usize,
        bytes: Vec<u8>,
        after: usize,
        probe: ProbeLoop,
    },
}

#[derive(Clone, Debug)]
pub(crate) struct AdversaryRunner {
    steps: Vec<TimedStep>,
    repeat: bool,
    pc: usize,
    next: u64,
    actor: Actor,
    access_ticks: u64,
    pub writes: Vec<u64>,
    pub probe_hits: Vec<u64>,
    done: bool,
}

impl AdversaryRunner {
    pub fn new(steps: Vec<TimedStep>, repeat: bool, start_pc: usize, actor: Actor, access_ticks: u64) -> Self {
        let done = steps.is_empty();
        AdversaryRunner {
            pc: start_pc.min(steps.len()),
            steps,
            repeat,
            next: 0,
            actor,
            access_ticks,
            writes: Vec::new(),
            probe_hits: Vec::new(),
            done,
        }
    }

    fn wake(&self) -> Option<u64> {
        if self.done {
            return None;
        }
        match &self.steps[self.pc] {
            TimedStep::FlipOnHit { probe, .. } => Some(probe.wake().max(self.next)),
            _ => Some(self.next),
        }
    }

    fn advance(&mut self) {
        self.pc += 1;
        if self.pc == self.steps.len() {
            if self.repeat {
                self.pc = 0;
            } else {
                self.done = true;
            }
        }
    }

    fn write(&mut self, m: &mut Machine, buffer: BufferId, offset: usize, bytes: &[u8], at: u64) {
        let t = m.write(buffer, offset, bytes, self.actor, at).unwrap_or_else(|| m.now());
        self.writes.push(t);
        self.next = t + self.access_ticks;
    }

    fn act(&mut self, m: &mut Machine, rng: &mut ChaCha8Rng) {
        let at = self.next;
        match &mut self.steps[self.pc] {
            TimedStep::Wait(k) => {
                self.next += *k;
                self.advance();
            }
            TimedStep::Write { buffer, offset, bytes } => {
                let (buffer, offset, bytes) = (*buffer, *offset, bytes.clone());
                self.write(m, buffer, offset, &bytes, at);
                self.advance();
            }
            TimedStep::FlipOnHit { buffer, offset, bytes, after, probe } => {
                if probe.wake() < at {
                    probe.next = at;
                }
                if probe.cycle(m, rng).is_some() && probe.hits.len() >= *after {
                    let (buffer, offset, bytes) = (*buffer, *offset, bytes.clone());
                    self.probe_hits = probe.hits.clone();
                    let now = m.now();
                    self.write(m, buffer, offset, &bytes, now);
                    self.advance();
                } else {
                    self.next = self.next.max(probe.wake());
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum TimedActor {
    Monitor(ProbeLoop),
    Adversary(AdversaryRunner),
}

impl TimedActor {
    fn wake(&self) -> Option<u64> {
        match self {
            TimedActor::Monitor(p) => Some(p.wake()),
            TimedActor::Adversary(a) => a.wake(),
        }
    }

    fn act(&mut self, m: &mut Machine, rng: &mut ChaCha8Rng) {
        match self {
            TimedActor::Monitor(p) => {
                p.cycle(m, rng);
            }
            TimedActor::Adversary(a) => a.act(m, rng),
        }
    }
}

/// A target invocation on the virtual timeline.
pub(crate) struct TimedRun {
    pub shim: SimShim,
    pub actors: Vec<TimedActor>,
    rng: ChaCha8Rng,
    jitter: u64,
    access_ticks: u64,
    cursor: u64,
    next: u64,
    horizon: u64,
}

impl TimedRun {
    pub fn new(shim: SimShim, actors: Vec<TimedActor>, rng: ChaCha8Rng, entry: u64) -> Self {
        let jitter = shim.machine.config().step_jitter;
        let access_ticks = shim.machine.config().access_ticks;
        TimedRun { shim, actors, rng, jitter, access_ticks, cursor: entry, next: entry, horizon: u64::MAX }
    }

    /// Actors stop acting at `horizon`.
    pub fn set_horizon(&mut self, horizon: u64) {
        self.horizon = horizon;
    }

    /// Lets the other actors run for `ticks` after the target's last access.
    pub fn drain(&mut self, ticks: u64) {
        self.next = self.next.max(self.shim.machine.now()) + ticks;
        self.sync();
    }

    /// Lets every actor due before the target's next request act, and returns
    /// the slot the target gets.
    fn sync(&mut self) -> u64 {
        // Fixed on entry: an actor whose own events fill its whole period
        // would otherwise keep pushing the target back.
        let due = self.next.max(self.shim.machine.now());
        loop {
            let pick = self
                .actors
                .iter()
                .enumerate()
                .filter_map(|(i, a)| a.wake().map(|w| (w, i)))
                .filter(|&(w, _)| w < due && w < self.horizon)
                .min();
            match pick {
                Some((_, i)) => self.actors[i].act(&mut self.shim.machine, &mut self.rng),
                None => return due.max(self.shim.machine.now()),
            }
        }
    }

    fn after_op(&mut self, first_slot: u64) {
        self.cursor = first_slot;
        self.next = self.shim.machine.now().max(first_slot + self.access_ticks);
    }
}

/// Sets up a timed invocation of `target`: buffers for `args`, actors from
/// `actors`, and an entry point drawn from the target's timing. Runs the
/// target and drains `drain` ticks.
pub(crate) fn run_timed(
    config: &SimConfig,
    target: &TargetDescriptor,
    args: &ArgRecord,
    seed: u64,
    drain: u64,
    horizon: u64,
    actors: impl FnOnce(&SimShim, &mut ChaCha8Rng) -> Result<Vec<TimedActor>>,
) -> Result<(Invocation, TimedRun)> {
    let shim = SimShim::new(config.clone(), args)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actors = actors(&shim, &mut rng)?;
    let t = &target.timing;
    let entry = 1 + t.lead + rng.gen_range(0..=t.entry_spread);
    let mut run = TimedRun::new(shim, actors, rng, entry);
    run.set_horizon(horizon);
    let inv = target.invoke(&mut run)?;
    run.drain(drain);
    Ok((inv, run))
}

impl Memory for TimedRun {
    fn read(&mut self, param: usize, offset: usize, len: usize) -> Vec<u8> {
        let at = self.sync();
        let bytes = self.shim.read(param, offset, len, at);
        self.after_op(at);
        bytes
    }

    fn write(&mut self, param: usize, offset: usize, bytes: &[u8]) {
        let at = self.sync();
        self.shim.write(param, offset, bytes, at);
        self.after_op(at);
    }

    fn pause(&mut self, ticks: u64) {
        if ticks == 0 {
            return;
        }
        let extra = if self.jitter > 0 { self.rng.gen_range(0..=self.jitter) } else { 0 };
        self.cursor += ticks + extra;
        self.next = self.next.max(self.cursor);
    }

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
        let at = self.sync();
        let r = self.shim.commit(at);
        self.after_op(at);
        r
    }

    fn tx_abort(&mut self) {
        self.shim.abort();
    }

    fn in_tx(&self) -> bool {
        self.shim.in_tx()
    }
}
