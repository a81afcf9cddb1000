//! Host-CPU backend: `clflush`, a serialised time-stamp counter, and real
//! shared buffers touched by concurrent probing or flipping threads.
//!
//! The prefetcher is left alone; monitored buffers sit on distinct pages
//! with a guard page after each, which is the only mitigation against
//! adjacent-line prefetch hits.

mod arch;
mod buffer;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Barrier, Mutex, RwLock};
use std::thread;

use crate::backend::BackendKind;
use crate::dropit::{AbortCause, TxBackend};
use crate::error::{usage, Error, Result};
use crate::mem::{ArgRecord, ArgValue, Memory};
use crate::monitor::{watched_lines, MonitorConfig, MonitorReport, ParamReport};
use crate::probe::{
    select_threshold, CalibrationProfile, Classification, EpochCounter, Histogram, LineId, ProbeBackend, ProbeSample,
    SharedBuffer, LINE_SIZE,
};
use crate::targets::{Invocation, TargetDescriptor};
use crate::trigger::{ExploitMethod, ExploitRequest};

pub use arch::{capabilities, cycles, Capabilities};
pub use buffer::HwBuffer;

/// Target pauses and probe delays are expressed in ticks; one flush+reload
/// cycle is this many ticks on every backend.
pub const TICKS_PER_FR_CYCLE: u64 = 3;

fn require_probe_capabilities() -> Result<Capabilities> {
    let caps = capabilities();
    if !caps.clflush || !caps.tsc {
        return Err(Error::Capability(format!(
            "hardware backend needs clflush and a time-stamp counter (clflush={}, tsc={})",
            caps.clflush, caps.tsc
        )));
    }
    Ok(caps)
}

/// Flush+Reload on host memory.
pub struct HwProbe {
    caps: Capabilities,
    buffers: Mutex<Vec<Arc<HwBuffer>>>,
    lines: Mutex<BTreeMap<LineId, (Arc<HwBuffer>, usize)>>,
    profile: Mutex<Option<CalibrationProfile>>,
    // Probing takes the read side, calibration the write side.
    gate: RwLock<()>,
}

impl HwProbe {
    pub fn new() -> Result<Self> {
        let caps = require_probe_capabilities()?;
        Ok(HwProbe {
            caps,
            buffers: Mutex::new(Vec::new()),
            lines: Mutex::new(BTreeMap::new()),
            profile: Mutex::new(None),
            gate: RwLock::new(()),
        })
    }

    pub fn capabilities(&self) -> Capabilities {
        self.caps
    }

    fn line_ptr(&self, line: LineId) -> Result<*const u8> {
        let lines = self.lines.lock().unwrap_or_else(|e| e.into_inner());
        let (buf, index) = lines.get(&line).ok_or_else(|| usage(format!("line {line} is not registered")))?;
        Ok(buf.line_ptr(*index))
    }
}

impl ProbeBackend for HwProbe {
    fn kind(&self) -> BackendKind {
        BackendKind::Hw
    }

    fn allocate_shared(&self, size_bytes: usize) -> Result<SharedBuffer> {
        let buf = Arc::new(HwBuffer::new(&vec![0; size_bytes])?);
        let shared = buf.shared().clone();
        let mut lines = self.lines.lock().unwrap_or_else(|e| e.into_inner());
        for (i, &l) in shared.line_ids().iter().enumerate() {
            lines.insert(l, (Arc::clone(&buf), i));
        }
        self.buffers.lock().unwrap_or_else(|e| e.into_inner()).push(buf);
        Ok(shared)
    }

    fn flush(&self, line: LineId) -> Result<()> {
        let _g = self.gate.read().unwrap_or_else(|e| e.into_inner());
        let p = self.line_ptr(line)?;
        // SAFETY: p points into a live registered allocation.
        unsafe { arch::flush(p) };
        Ok(())
    }

    fn timed_reload(&self, line: LineId) -> Result<ProbeSample> {
        let _g = self.gate.read().unwrap_or_else(|e| e.into_inner());
        let Some(threshold) = self.profile.lock().unwrap_or_else(|e| e.into_inner()).as_ref().map(|p| p.threshold)
        else {
            return Err(Error::State("timed_reload before calibration".into()));
        };
        let p = self.line_ptr(line)?;
        let timestamp = cycles();
        // SAFETY: p points into a live registered allocation.
        let latency = unsafe { arch::timed_load(p) };
        let classification = if latency < threshold { Classification::Hit } else { Classification::Miss };
        Ok(ProbeSample { timestamp, latency, classification })
    }

    fn touch(&self, line: LineId) -> Result<()> {
        let p = self.line_ptr(line)?;
        // SAFETY: p points into a live registered allocation.
        unsafe { arch::load(p) };
        Ok(())
    }

    fn calibrate(&self, rounds: usize) -> Result<CalibrationProfile> {
        if rounds < 100 {
            return Err(usage("hardware calibration needs at least 100 rounds"));
        }
        let _g = self.gate.write().unwrap_or_else(|e| e.into_inner());
        let scratch = HwBuffer::new(&[1u8; LINE_SIZE])?;
        let p = scratch.line_ptr(0);
        let mut hits = Histogram::new();
        let mut misses = Histogram::new();
        let mut pair_total = 0u64;
        for _ in 0..rounds {
            // SAFETY: p points into scratch, alive for the whole loop.
            unsafe {
                arch::load(p);
                hits.add(arch::timed_load(p));
                let start = cycles();
                arch::flush(p);
                misses.add(arch::timed_load(p));
                pair_total += cycles().saturating_sub(start);
            }
        }
        let threshold = select_threshold(&hits, &misses)?;
        let profile = CalibrationProfile {
            backend: BackendKind::Hw,
            threshold,
            hit_latencies: hits,
            miss_latencies: misses,
            fr_cycle_cost: (pair_total / rounds as u64).max(1),
        };
        *self.profile.lock().unwrap_or_else(|e| e.into_inner()) = Some(profile.clone());
        Ok(profile)
    }

    fn profile(&self) -> Option<CalibrationProfile> {
        self.profile.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

enum Binding {
    Buffer(Arc<HwBuffer>),
    Scalar(u64),
}

struct HwTx {
    backend: TxBackend,
    /// Line (buffer index, line index) to the version seen at first read.
    reads: BTreeMap<(usize, usize), u64>,
    writes: Vec<(usize, usize, Vec<u8>)>,
    doomed: bool,
}

/// Target-side shim over real buffers.
pub struct HwMemory {
    params: Vec<Binding>,
    tick_cycles: u64,
    tx: Option<HwTx>,
}

impl HwMemory {
    pub fn new(args: &ArgRecord, profile: &CalibrationProfile) -> Result<Self> {
        let params = args
            .values
            .iter()
            .map(|v| match v {
                ArgValue::Ref(b) => HwBuffer::new(b).map(|b| Binding::Buffer(Arc::new(b))),
                ArgValue::Value(v) => Ok(Binding::Scalar(*v)),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HwMemory { params, tick_cycles: (profile.fr_cycle_cost / TICKS_PER_FR_CYCLE).max(1), tx: None })
    }

    pub fn buffer(&self, param: usize) -> Result<Arc<HwBuffer>> {
        match self.params.get(param) {
            Some(Binding::Buffer(b)) => Ok(Arc::clone(b)),
            Some(Binding::Scalar(_)) => Err(usage(format!("parameter {param} is passed by value"))),
            None => Err(usage(format!("no parameter {param}"))),
        }
    }

    fn buf(&self, param: usize) -> &HwBuffer {
        match self.params.get(param) {
            Some(Binding::Buffer(b)) => b,
            _ => panic!("parameter {param} is not a reference parameter"),
        }
    }

    pub fn tick_cycles(&self) -> u64 {
        self.tick_cycles
    }

    fn buffers(&self) -> impl Iterator<Item = &HwBuffer> {
        self.params.iter().filter_map(|b| match b {
            Binding::Buffer(b) => Some(b.as_ref()),
            Binding::Scalar(_) => None,
        })
    }
}

impl Memory for HwMemory {
    fn read(&mut self, param: usize, offset: usize, len: usize) -> Vec<u8> {
        let buf = match self.params.get(param) {
            Some(Binding::Buffer(b)) => Arc::clone(b),
            _ => panic!("parameter {param} is not a reference parameter"),
        };
        let Some(tx) = self.tx.as_mut().filter(|t| t.backend != TxBackend::LockFallback) else {
            return buf.load(offset, len);
        };
        let lines = buf.line_range(offset, len);
        let before: Vec<u64> = lines.clone().map(|l| buf.stable_version(l)).collect();
        let mut bytes = buf.load(offset, len);
        for (l, v) in lines.zip(before) {
            if buf.version(l) != v {
                tx.doomed = true;
            }
            match tx.reads.get(&(param, l)) {
                Some(&seen) if seen != v => tx.doomed = true,
                Some(_) => {}
                None => {
                    tx.reads.insert((param, l), v);
                }
            }
        }
        for (p, off, data) in &tx.writes {
            if *p != param {
                continue;
            }
            for (i, &b) in data.iter().enumerate() {
                let pos = off + i;
                if pos >= offset && pos < offset + bytes.len() {
                    bytes[pos - offset] = b;
                }
            }
        }
        bytes
    }

    fn write(&mut self, param: usize, offset: usize, bytes: &[u8]) {
        match self.tx.as_mut() {
            Some(tx) if tx.backend != TxBackend::LockFallback => tx.writes.push((param, offset, bytes.to_vec())),
            Some(_) => self.buf(param).store_locked(offset, bytes),
            None => self.buf(param).store(offset, bytes),
        }
    }

    fn pause(&mut self, ticks: u64) {
        let until = cycles() + ticks * self.tick_cycles;
        while cycles() < until {
            std::hint::spin_loop();
        }
    }

    fn scalar(&self, param: usize) -> u64 {
        match self.params.get(param) {
            Some(Binding::Scalar(v)) => *v,
            _ => panic!("parameter {param} is not a by-value scalar"),
        }
    }

    fn param_len(&self, param: usize) -> usize {
        match self.params.get(param) {
            Some(Binding::Buffer(b)) => b.len(),
            _ => 0,
        }
    }

    fn tx_begin(&mut self, backend: TxBackend) -> Result<()> {
        if self.tx.is_some() {
            return Err(usage("transactional regions do not nest"));
        }
        if backend == TxBackend::LockFallback {
            for b in self.buffers() {
                b.lock();
            }
        }
        self.tx = Some(HwTx { backend, reads: BTreeMap::new(), writes: Vec::new(), doomed: false });
        Ok(())
    }

    fn tx_commit(&mut self) -> std::result::Result<(), AbortCause> {
        let Some(tx) = self.tx.take() else {
            return Err(AbortCause::Explicit);
        };
        if tx.backend == TxBackend::LockFallback {
            for b in self.buffers() {
                b.unlock();
            }
            return Ok(());
        }
        // Writers are held off while the read set is validated and the
        // write set published.
        for b in self.buffers() {
            b.lock();
        }
        let consistent = !tx.doomed && tx.reads.iter().all(|(&(p, l), &v)| self.buf(p).version(l) == v);
        if consistent {
            for (p, off, data) in &tx.writes {
                self.buf(*p).store_locked(*off, data);
            }
        }
        for b in self.buffers() {
            b.unlock();
        }
        if consistent {
            Ok(())
        } else {
            Err(AbortCause::Conflict)
        }
    }

    fn tx_abort(&mut self) {
        if let Some(tx) = self.tx.take() {
            if tx.backend == TxBackend::LockFallback {
                for b in self.buffers() {
                    b.unlock();
                }
            }
        }
    }

    fn in_tx(&self) -> bool {
        self.tx.is_some()
    }

    fn native(&self) -> bool {
        true
    }
}

/// Probe loop state for one thread.
struct Prober {
    ptrs: Vec<*const u8>,
    threshold: u64,
    period: u64,
    epochs: EpochCounter,
}

impl Prober {
    fn flush_all(&self) {
        for &p in &self.ptrs {
            // SAFETY: pointers refer to buffers kept alive by the caller.
            unsafe { arch::flush(p) };
        }
    }

    /// One reload round; returns whether it counts as a new fetch.
    fn round(&mut self) -> bool {
        let mut hit = false;
        for &p in &self.ptrs {
            // SAFETY: as above.
            hit |= unsafe { arch::timed_load(p) } < self.threshold;
        }
        let step = self.epochs.observe(hit);
        if step.flush {
            self.flush_all();
        }
        step.counted
    }
}

// The raw pointers are only dereferenced while the owning buffers are alive
// inside a thread scope.
unsafe impl Send for Prober {}

fn spin_until(t: u64) {
    while cycles() < t {
        std::hint::spin_loop();
    }
}

pub(crate) fn monitor_invoke(
    _probe: &Arc<HwProbe>,
    profile: &CalibrationProfile,
    target: &TargetDescriptor,
    args: &ArgRecord,
    cfg: &MonitorConfig,
) -> Result<MonitorReport> {
    let mut mem = HwMemory::new(args, profile)?;
    let mut probers = Vec::new();
    for &param in &cfg.params_to_watch {
        let buf = mem.buffer(param).ok();
        let lines = watched_lines(target, args, param, cfg.monitor_all_lines, |_| {
            Ok(buf.as_ref().map(|b| b.shared().line_ids().to_vec()).unwrap_or_default())
        })?;
        let buf = buf.expect("checked by watched_lines");
        let ptrs = (0..lines.len()).map(|i| buf.line_ptr(i)).collect();
        probers.push(Prober {
            ptrs,
            threshold: profile.threshold,
            period: cfg.probe_period,
            epochs: EpochCounter::new(cfg.rearm_cycles),
        });
    }
    let stop = AtomicBool::new(false);
    let barrier = Barrier::new(probers.len() + 1);
    let start = cycles();
    let deadline = start.saturating_add(cfg.max_duration);
    let (invocation, hits) = thread::scope(|s| {
        let handles: Vec<_> = probers
            .into_iter()
            .map(|mut p| {
                let (stop, barrier) = (&stop, &barrier);
                s.spawn(move || {
                    let mut hits = Vec::new();
                    p.flush_all();
                    barrier.wait();
                    let mut next = cycles() + p.period;
                    while !stop.load(Ordering::Relaxed) && cycles() < deadline {
                        spin_until(next);
                        if p.round() {
                            hits.push(cycles() - start);
                        }
                        next += p.period;
                    }
                    hits
                })
            })
            .collect();
        barrier.wait();
        mem.pause(target.timing.lead);
        let inv = target.invoke(&mut mem);
        // Give the probes one more hold-off window to see the last fetch.
        mem.pause(TICKS_PER_FR_CYCLE * (u64::from(cfg.rearm_cycles) + 2));
        stop.store(true, Ordering::Relaxed);
        let hits: Vec<Vec<u64>> = handles.into_iter().map(|h| h.join().expect("probe thread")).collect();
        (inv, hits)
    });
    let invocation = invocation?;
    let per_param = cfg
        .params_to_watch
        .iter()
        .zip(hits)
        .map(|(&param, hit_timestamps)| ParamReport { param, fetch_count: hit_timestamps.len(), hit_timestamps })
        .collect();
    Ok(MonitorReport { target: target.id.clone(), per_param, invocation })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn exploit_invoke(
    _probe: &Arc<HwProbe>,
    profile: &CalibrationProfile,
    target: &TargetDescriptor,
    args: &ArgRecord,
    req: &ExploitRequest,
    after: usize,
    bad: &[u8],
    good: &[u8],
) -> Result<(Invocation, Vec<u64>)> {
    let mut mem = HwMemory::new(args, profile)?;
    let buf = mem.buffer(req.param)?;
    let tick = mem.tick_cycles();
    let stop = AtomicBool::new(false);
    let barrier = Barrier::new(2);
    let start = cycles();
    let (inv, writes) = thread::scope(|s| {
        let (stop, barrier, buf) = (&stop, &barrier, Arc::clone(&buf));
        let handle = s.spawn(move || {
            let mut writes = Vec::new();
            match req.method {
                ExploitMethod::CacheTrigger => {
                    let mut p = Prober {
                        ptrs: vec![buf.line_ptr(0)],
                        threshold: profile.threshold,
                        period: profile.fr_cycle_cost,
                        epochs: EpochCounter::new(crate::monitor::DEFAULT_REARM_CYCLES),
                    };
                    p.flush_all();
                    barrier.wait();
                    let mut seen = 0;
                    while !stop.load(Ordering::Relaxed) {
                        if p.round() {
                            seen += 1;
                            if seen >= after {
                                buf.store(0, bad);
                                writes.push(cycles() - start);
                                break;
                            }
                        }
                    }
                }
                ExploitMethod::ValueFlipping => {
                    barrier.wait();
                    while !stop.load(Ordering::Relaxed) {
                        buf.store(0, bad);
                        writes.push(cycles() - start);
                        buf.store(0, good);
                    }
                }
                ExploitMethod::BusyWait => {
                    barrier.wait();
                    spin_until(start + req.busy_wait_delay.unwrap_or(0) * tick);
                    buf.store(0, bad);
                    writes.push(cycles() - start);
                }
            }
            writes
        });
        barrier.wait();
        mem.pause(target.timing.lead);
        let inv = target.invoke(&mut mem);
        stop.store(true, Ordering::Relaxed);
        (inv, handle.join().expect("exploit thread"))
    });
    Ok((inv?, writes))
}

/// Number of CPUs available to this process.
pub fn available_cpus() -> usize {
    thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_capability_or_error() {
        match HwProbe::new() {
            Ok(p) => {
                let buf = p.allocate_shared(4097).unwrap();
                assert_eq!(buf.line_ids().len(), 65);
                assert_eq!(buf.base_address() % 4096, 0);
                assert!(matches!(p.timed_reload(buf.first_line()), Err(Error::State(_))));
                assert!(matches!(p.flush(LineId(1)), Err(Error::Usage(_))));
            }
            Err(e) => assert!(matches!(e, Error::Capability(_))),
        }
    }

    #[test]
    fn emulated_tx_on_host_memory() {
        let Ok(probe) = HwProbe::new() else { return };
        let profile = probe.calibrate(200).unwrap_or_else(|_| CalibrationProfile {
            backend: BackendKind::Hw,
            threshold: 100,
            hit_latencies: Histogram::new(),
            miss_latencies: Histogram::new(),
            fr_cycle_cost: 300,
        });
        let args = ArgRecord::new(vec![ArgValue::Ref(vec![5; 8])]);
        let mut mem = HwMemory::new(&args, &profile).unwrap();
        let buf = mem.buffer(0).unwrap();
        mem.tx_begin(TxBackend::EmulatedTx).unwrap();
        assert_eq!(mem.read(0, 0, 1), vec![5]);
        buf.store(0, &[6]);
        assert_eq!(mem.tx_commit(), Err(AbortCause::Conflict));
        mem.tx_begin(TxBackend::EmulatedTx).unwrap();
        assert_eq!(mem.read(0, 0, 1), vec![6]);
        mem.write(0, 1, &[9]);
        assert_eq!(buf.load(1, 1), vec![5]);
        assert_eq!(mem.tx_commit(), Ok(()));
        assert_eq!(buf.load(1, 1), vec![9]);
    }
}
