//! Deterministic virtual cache and logical clock.
//!
//! Every memory event occupies one slot on a single global timeline, so the
//! event log is totally ordered with strictly increasing `vtime`. Actors
//! (target, monitor, trigger, adversaries) request slots; the engine in
//! [`engine`] arbitrates timed runs and [`schedule`] drives order-only
//! interleavings.

pub(crate) mod engine;
pub mod schedule;
pub(crate) mod shim;

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{Classification, LineId, PageAllocator, ProbeSample, SharedBuffer};

pub use schedule::{
    interleaving_count, replay, run_interleavings, sample_interleavings, target_step_count, AdversaryProgram,
    AdversaryStep, InterleavingReport, Schedule, ScheduleActor, ScheduleEntry, ScheduleRun, TargetOp,
};

/// Simulator constants. The latencies and costs are configuration, not
/// measurements of any machine.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    /// Reload latency reported for a cached line.
    pub hit_latency: u64,
    /// Reload latency reported for an uncached line.
    pub miss_latency: u64,
    pub flush_ticks: u64,
    pub reload_ticks: u64,
    /// Clock advance of one intercepted access.
    pub access_ticks: u64,
    /// Each target pause is stretched by a uniform draw from `0..=step_jitter`.
    pub step_jitter: u64,
    /// Each probe cycle is delayed by a uniform draw from `0..=noise_ticks`.
    pub noise_ticks: u64,
}

impl SimConfig {
    pub fn with_seed(seed: u64) -> Self {
        SimConfig {
            seed,
            hit_latency: 70,
            miss_latency: 200,
            flush_ticks: 1,
            reload_ticks: 2,
            access_ticks: 1,
            step_jitter: 1,
            noise_ticks: 0,
        }
    }

    /// Duration of one flush + reload pair in ticks.
    pub fn fr_cycle_cost(&self) -> u64 {
        self.flush_ticks + self.reload_ticks
    }

    pub fn validate(&self) -> Result<()> {
        if self.hit_latency >= self.miss_latency {
            return Err(Error::Config(format!(
                "hit latency {} must be below miss latency {}",
                self.hit_latency, self.miss_latency
            )));
        }
        if self.flush_ticks == 0 || self.reload_ticks == 0 || self.access_ticks == 0 {
            return Err(Error::Config("flush, reload and access costs must be at least one tick".into()));
        }
        Ok(())
    }
}

/// Seed for trial `index` of a run seeded with `seed` (SplitMix64 step).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Logical time. Only moves forward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualClock {
    now: u64,
}

impl VirtualClock {
    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn step(&mut self, ticks: u64) -> u64 {
        self.now += ticks;
        self.now
    }

    /// Moves to `t` if that is later than now.
    pub fn advance_to(&mut self, t: u64) -> u64 {
        self.now = self.now.max(t);
        self.now
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Actor {
    Target,
    Monitor,
    Trigger,
    Adversary,
    TxBody,
}

impl Actor {
    pub fn as_str(self) -> &'static str {
        match self {
            Actor::Target => "target",
            Actor::Monitor => "monitor",
            Actor::Trigger => "trigger",
            Actor::Adversary => "adversary",
            Actor::TxBody => "txbody",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Read,
    Write,
    Flush,
    Reload,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Read => "read",
            EventKind::Write => "write",
            EventKind::Flush => "flush",
            EventKind::Reload => "reload",
        }
    }

    /// Everything except a flush leaves the line cached.
    pub fn caches(self) -> bool {
        !matches!(self, EventKind::Flush)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessEvent {
    pub vtime: u64,
    pub actor: Actor,
    pub kind: EventKind,
    pub line: LineId,
}

/// Writes `vtime,actor,kind,line` rows with a header.
pub fn write_events_csv<W: io::Write>(events: &[AccessEvent], mut out: W) -> io::Result<()> {
    writeln!(out, "vtime,actor,kind,line")?;
    for e in events {
        writeln!(out, "{},{},{},{}", e.vtime, e.actor.as_str(), e.kind.as_str(), e.line)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct LineState {
    buffer: usize,
    cached: bool,
    version: u64,
}

#[derive(Clone, Debug)]
struct SimBuffer {
    shared: SharedBuffer,
    data: Vec<u8>,
    locked: bool,
}

#[derive(Clone, Debug)]
struct DeferredWrite {
    buffer: usize,
    offset: usize,
    bytes: Vec<u8>,
    actor: Actor,
}

/// The simulated memory system: buffers, per-line cache state and versions,
/// the clock, and the event log.
#[derive(Clone, Debug)]
pub struct Machine {
    config: SimConfig,
    clock: VirtualClock,
    alloc: PageAllocator,
    buffers: Vec<SimBuffer>,
    lines: BTreeMap<LineId, LineState>,
    log: Vec<AccessEvent>,
    deferred: Vec<DeferredWrite>,
}

/// Index of a buffer inside one [`Machine`].
pub type BufferId = usize;

impl Machine {
    pub fn new(config: SimConfig) -> Self {
        Machine {
            config,
            clock: VirtualClock::default(),
            alloc: PageAllocator::new(16),
            buffers: Vec::new(),
            lines: BTreeMap::new(),
            log: Vec::new(),
            deferred: Vec::new(),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn clock(&self) -> VirtualClock {
        self.clock
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    /// Lets time pass without an event.
    pub fn idle(&mut self, ticks: u64) {
        self.clock.step(ticks);
    }

    pub fn allocate(&mut self, size_bytes: usize) -> Result<BufferId> {
        let shared = self.alloc.allocate(size_bytes)?;
        let id = self.buffers.len();
        for &line in shared.line_ids() {
            self.lines.insert(line, LineState { buffer: id, cached: false, version: 0 });
        }
        self.buffers.push(SimBuffer { data: vec![0; size_bytes], shared, locked: false });
        Ok(id)
    }

    pub fn shared(&self, id: BufferId) -> &SharedBuffer {
        &self.buffers[id].shared
    }

    pub fn buffer_count(&self) -> usize {
        self.buffers.len()
    }

    pub fn buffer_of(&self, line: LineId) -> Option<BufferId> {
        self.lines.get(&line).map(|s| s.buffer)
    }

    fn line(&self, line: LineId) -> Result<&LineState> {
        self.lines.get(&line).ok_or_else(|| Error::Usage(format!("line {line} is not registered")))
    }

    pub fn is_cached(&self, line: LineId) -> Result<bool> {
        Ok(self.line(line)?.cached)
    }

    pub fn version(&self, line: LineId) -> Result<u64> {
        Ok(self.line(line)?.version)
    }

    /// Host-side initialisation; not an event, leaves cache state alone.
    pub fn load(&mut self, id: BufferId, bytes: &[u8]) {
        let data = &mut self.buffers[id].data;
        let n = bytes.len().min(data.len());
        data[..n].copy_from_slice(&bytes[..n]);
    }

    /// Current contents, without touching the cache.
    pub fn peek(&self, id: BufferId) -> &[u8] {
        &self.buffers[id].data
    }

    fn emit(&mut self, at: u64, line: LineId, kind: EventKind, actor: Actor) -> Result<AccessEvent> {
        let state = self.lines.get_mut(&line).ok_or_else(|| Error::Usage(format!("line {line} is not registered")))?;
        let vtime = self.clock.advance_to(at);
        self.clock.step(1);
        state.cached = kind.caches();
        if kind == EventKind::Write {
            state.version += 1;
        }
        let event = AccessEvent { vtime, actor, kind, line };
        self.log.push(event);
        Ok(event)
    }

    /// Logs one access at the current time and advances the clock by the
    /// configured per-access cost.
    pub fn record_access(&mut self, line: LineId, kind: EventKind, actor: Actor) -> Result<AccessEvent> {
        if !matches!(kind, EventKind::Read | EventKind::Write) {
            return Err(Error::Usage("record_access takes a read or a write".into()));
        }
        let event = self.emit(self.now(), line, kind, actor)?;
        self.clock.advance_to(event.vtime + self.config.access_ticks);
        Ok(event)
    }

    /// Reads `len` bytes at `offset`, logging one event per touched line
    /// starting no earlier than `at`. Returns the bytes and the first slot.
    pub fn read(&mut self, id: BufferId, offset: usize, len: usize, actor: Actor, at: u64) -> (Vec<u8>, u64) {
        let lines = self.buffers[id].shared.lines_in(offset, len).to_vec();
        let mut first = None;
        for line in lines {
            let e = self.emit(at, line, EventKind::Read, actor).expect("buffer lines are registered");
            first.get_or_insert(e.vtime);
        }
        let data = &self.buffers[id].data;
        let start = offset.min(data.len());
        let end = (offset + len).min(data.len());
        (data[start..end].to_vec(), first.unwrap_or_else(|| self.now()))
    }

    /// Writes `bytes` at `offset`. A write from anyone but `TxBody`/`Target`
    /// to a locked buffer is queued until [`Machine::unlock`]. Returns the
    /// first slot used, or `None` when deferred.
    pub fn write(&mut self, id: BufferId, offset: usize, bytes: &[u8], actor: Actor, at: u64) -> Option<u64> {
        if self.buffers[id].locked && !matches!(actor, Actor::Target | Actor::TxBody) {
            self.deferred.push(DeferredWrite { buffer: id, offset, bytes: bytes.to_vec(), actor });
            return None;
        }
        Some(self.write_now(id, offset, bytes, actor, at))
    }

    fn write_now(&mut self, id: BufferId, offset: usize, bytes: &[u8], actor: Actor, at: u64) -> u64 {
        let lines = self.buffers[id].shared.lines_in(offset, bytes.len()).to_vec();
        let mut first = None;
        for line in lines {
            let e = self.emit(at, line, EventKind::Write, actor).expect("buffer lines are registered");
            first.get_or_insert(e.vtime);
        }
        let data = &mut self.buffers[id].data;
        let start = offset.min(data.len());
        let end = (offset + bytes.len()).min(data.len());
        data[start..end].copy_from_slice(&bytes[..end - start]);
        first.unwrap_or_else(|| self.now())
    }

    pub fn flush(&mut self, line: LineId, actor: Actor, at: u64) -> Result<AccessEvent> {
        self.emit(at, line, EventKind::Flush, actor)
    }

    /// Timed reload: Hit iff the line was accessed since its latest flush.
    /// The reload itself caches the line.
    pub fn reload(&mut self, line: LineId, actor: Actor, at: u64) -> Result<ProbeSample> {
        let cached = self.line(line)?.cached;
        let event = self.emit(at, line, EventKind::Reload, actor)?;
        let (latency, classification) = if cached {
            (self.config.hit_latency, Classification::Hit)
        } else {
            (self.config.miss_latency, Classification::Miss)
        };
        Ok(ProbeSample { timestamp: event.vtime, latency, classification })
    }

    pub fn lock(&mut self, ids: &[BufferId]) {
        for &id in ids {
            self.buffers[id].locked = true;
        }
    }

    /// Releases the locks and applies queued writes in arrival order.
    pub fn unlock(&mut self, ids: &[BufferId]) {
        for &id in ids {
            self.buffers[id].locked = false;
        }
        let pending = std::mem::take(&mut self.deferred);
        for w in pending {
            if self.buffers[w.buffer].locked {
                self.deferred.push(w);
            } else {
                let now = self.now();
                self.write_now(w.buffer, w.offset, &w.bytes, w.actor, now);
            }
        }
    }

    pub fn log(&self) -> &[AccessEvent] {
        &self.log
    }

    pub fn into_log(self) -> Vec<AccessEvent> {
        self.log
    }
}

/// Cached state of `line` recomputed from the event log alone.
pub fn cached_from_log(log: &[AccessEvent], line: LineId) -> bool {
    log.iter().rev().find(|e| e.line == line).map(|e| e.kind.caches()).unwrap_or(false)
}
