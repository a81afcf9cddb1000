//! Flush+Reload primitives behind a backend contract.
//!
//! A backend hands out page-granular [`SharedBuffer`]s, flushes single cache
//! lines, and times reloads. Classification uses the threshold stored in the
//! backend's [`CalibrationProfile`].

mod sim;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backend::BackendKind;
use crate::error::{Error, Result};

pub use sim::SimProbe;

pub const LINE_SIZE: usize = 64;
pub const PAGE_SIZE: usize = 4096;

/// A cache-line token: the line-aligned address divided by [`LINE_SIZE`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LineId(pub u64);

impl LineId {
    pub fn of_address(addr: u64) -> Self {
        LineId(addr / LINE_SIZE as u64)
    }

    pub fn address(self) -> u64 {
        self.0 * LINE_SIZE as u64
    }
}

impl fmt::Display for LineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.address())
    }
}

/// Page-granular memory shared between the host and a black box.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedBuffer {
    base_address: u64,
    size_bytes: usize,
    allocated_bytes: usize,
    line_ids: Vec<LineId>,
}

impl SharedBuffer {
    /// Describes a buffer of `size_bytes` starting at the page-aligned `base_address`.
    pub fn new(base_address: u64, size_bytes: usize) -> Result<Self> {
        if size_bytes == 0 {
            return Err(Error::Usage("shared buffer size must be at least one byte".into()));
        }
        if base_address & (PAGE_SIZE as u64 - 1) != 0 {
            return Err(Error::Usage(format!("base address {base_address:#x} is not page aligned")));
        }
        let allocated_bytes = pages_for(size_bytes) * PAGE_SIZE;
        let first = LineId::of_address(base_address).0;
        let line_ids = (0..lines_for(size_bytes) as u64).map(|i| LineId(first + i)).collect();
        Ok(SharedBuffer { base_address, size_bytes, allocated_bytes, line_ids })
    }

    pub fn base_address(&self) -> u64 {
        self.base_address
    }

    /// Requested size.
    pub fn size_bytes(&self) -> usize {
        self.size_bytes
    }

    /// Size after rounding up to whole pages.
    pub fn allocated_bytes(&self) -> usize {
        self.allocated_bytes
    }

    pub fn pages(&self) -> usize {
        self.allocated_bytes / PAGE_SIZE
    }

    pub fn line_ids(&self) -> &[LineId] {
        &self.line_ids
    }

    pub fn first_line(&self) -> LineId {
        self.line_ids[0]
    }

    pub fn contains(&self, line: LineId) -> bool {
        self.line_ids.binary_search(&line).is_ok()
    }

    /// Lines covering `offset..offset + len`, clamped to the buffer.
    pub fn lines_in(&self, offset: usize, len: usize) -> &[LineId] {
        if len == 0 || offset >= self.size_bytes {
            return &[];
        }
        let end = (offset + len).min(self.size_bytes);
        let first = offset / LINE_SIZE;
        let last = (end - 1) / LINE_SIZE;
        &self.line_ids[first..=last]
    }
}

pub fn pages_for(size_bytes: usize) -> usize {
    size_bytes.div_ceil(PAGE_SIZE)
}

pub fn lines_for(size_bytes: usize) -> usize {
    size_bytes.div_ceil(LINE_SIZE)
}

/// Hands out page-aligned address ranges with one unused guard page between
/// consecutive buffers, so watched lines of different buffers are never on
/// neighbouring pages.
#[derive(Clone, Debug)]
pub struct PageAllocator {
    next_page: u64,
}

impl PageAllocator {
    pub fn new(first_page: u64) -> Self {
        PageAllocator { next_page: first_page }
    }

    pub fn allocate(&mut self, size_bytes: usize) -> Result<SharedBuffer> {
        if size_bytes == 0 {
            return Err(Error::Usage("shared buffer size must be at least one byte".into()));
        }
        let pages = pages_for(size_bytes) as u64;
        let base = self
            .next_page
            .checked_mul(PAGE_SIZE as u64)
            .ok_or_else(|| Error::Resource("virtual address space exhausted".into()))?;
        self.next_page = self
            .next_page
            .checked_add(pages + 1)
            .ok_or_else(|| Error::Resource("virtual address space exhausted".into()))?;
        SharedBuffer::new(base, size_bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Classification {
    Hit,
    Miss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub timestamp: u64,
    pub latency: u64,
    pub classification: Classification,
}

/// Latency histogram with unit-width bins.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    bins: BTreeMap<u64, u64>,
}

impl Histogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: u64) {
        *self.bins.entry(value).or_insert(0) += 1;
    }

    pub fn count(&self) -> u64 {
        self.bins.values().sum()
    }

    pub fn min(&self) -> Option<u64> {
        self.bins.keys().next().copied()
    }

    pub fn max(&self) -> Option<u64> {
        self.bins.keys().next_back().copied()
    }

    pub fn bins(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.bins.iter().map(|(&v, &n)| (v, n))
    }

    pub fn mean(&self) -> Option<f64> {
        let n = self.count();
        (n > 0).then(|| self.bins.iter().map(|(&v, &c)| v as f64 * c as f64).sum::<f64>() / n as f64)
    }

    /// Smallest value `v` such that at least `q` of the samples are `<= v`.
    pub fn percentile(&self, q: f64) -> Option<u64> {
        let n = self.count();
        if n == 0 {
            return None;
        }
        let rank = ((q.clamp(0.0, 1.0) * n as f64).ceil() as u64).max(1);
        let mut seen = 0;
        for (&v, &c) in &self.bins {
            seen += c;
            if seen >= rank {
                return Some(v);
            }
        }
        self.max()
    }

    /// Samples `< threshold`.
    pub fn count_below(&self, threshold: u64) -> u64 {
        self.bins.range(..threshold).map(|(_, &c)| c).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub backend: BackendKind,
    pub threshold: u64,
    pub hit_latencies: Histogram,
    pub miss_latencies: Histogram,
    /// Mean duration of one flush + timed reload pair.
    pub fr_cycle_cost: u64,
}

impl CalibrationProfile {
    pub fn classify(&self, latency: u64) -> Classification {
        if latency < self.threshold {
            Classification::Hit
        } else {
            Classification::Miss
        }
    }

    /// Fraction of calibration samples the threshold puts on the wrong side.
    pub fn misclassification_rate(&self) -> f64 {
        misclassification(&self.hit_latencies, &self.miss_latencies, self.threshold)
    }
}

fn misclassification(hits: &Histogram, misses: &Histogram, threshold: u64) -> f64 {
    let total = hits.count() + misses.count();
    if total == 0 {
        return 1.0;
    }
    let wrong = (hits.count() - hits.count_below(threshold)) + misses.count_below(threshold);
    wrong as f64 / total as f64
}

/// Maximum tolerated overlap of the two latency populations.
pub const MAX_CALIBRATION_OVERLAP: f64 = 0.10;

/// Picks the hit/miss threshold: the midpoint between the 99th-percentile hit
/// latency and the 1st-percentile miss latency. When those cross, the
/// threshold minimizing misclassification is used instead, and more than
/// [`MAX_CALIBRATION_OVERLAP`] misclassified samples is a calibration failure.
pub fn select_threshold(hits: &Histogram, misses: &Histogram) -> Result<u64> {
    let (Some(hit_p99), Some(miss_p01)) = (hits.percentile(0.99), misses.percentile(0.01)) else {
        return Err(Error::Calibration("no samples".into()));
    };
    let threshold = if hit_p99 < miss_p01 {
        // ceil of the midpoint keeps the threshold strictly above hit_p99
        hit_p99 + (miss_p01 - hit_p99).div_ceil(2)
    } else {
        let candidates = hits.bins().chain(misses.bins()).map(|(v, _)| v + 1);
        candidates
            .min_by(|&a, &b| {
                misclassification(hits, misses, a).total_cmp(&misclassification(hits, misses, b)).then(a.cmp(&b))
            })
            .unwrap_or(hit_p99 + 1)
    };
    let overlap = misclassification(hits, misses, threshold);
    if overlap > MAX_CALIBRATION_OVERLAP {
        return Err(Error::Calibration(format!(
            "hit and miss latencies overlap: {:.1}% of samples misclassified at threshold {threshold}",
            overlap * 100.0
        )));
    }
    Ok(threshold)
}

/// Turns a stream of reload classifications into distinct fetches.
///
/// A reload re-caches the line, so after a counted hit the next
/// `rearm_cycles` reloads are ignored and the line is flushed after the last
/// of them. Without a hold-off the line is flushed after every reload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochCounter {
    rearm_cycles: u32,
    left: u32,
}

/// What a probe loop does after one reload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochStep {
    /// The reload revealed a new fetch.
    pub counted: bool,
    /// Flush the line before the next reload.
    pub flush: bool,
}

impl EpochCounter {
    pub fn new(rearm_cycles: u32) -> Self {
        EpochCounter { rearm_cycles, left: 0 }
    }

    pub fn observe(&mut self, hit: bool) -> EpochStep {
        if self.left > 0 {
            self.left -= 1;
            return EpochStep { counted: false, flush: self.left == 0 };
        }
        if hit && self.rearm_cycles > 0 {
            self.left = self.rearm_cycles;
            return EpochStep { counted: true, flush: false };
        }
        EpochStep { counted: hit, flush: true }
    }
}

/// Flush+Reload backend contract.
///
/// Operations on distinct lines may run concurrently; `calibrate` excludes
/// every other operation while it runs.
pub trait ProbeBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn allocate_shared(&self, size_bytes: usize) -> Result<SharedBuffer>;

    fn flush(&self, line: LineId) -> Result<()>;

    fn timed_reload(&self, line: LineId) -> Result<ProbeSample>;

    /// An ordinary victim-side access to `line`.
    fn touch(&self, line: LineId) -> Result<()>;

    fn calibrate(&self, rounds: usize) -> Result<CalibrationProfile>;

    fn profile(&self) -> Option<CalibrationProfile>;
}
