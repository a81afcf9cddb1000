//! CPU feature probing and the raw cache instructions.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub clflush: bool,
    /// `rdtscp` is present.
    pub tsc: bool,
    pub rtm: bool,
    pub cpus: usize,
}

#[cfg(target_arch = "x86_64")]
pub fn capabilities() -> Capabilities {
    use std::arch::x86_64::__cpuid;
    let clflush = __cpuid(1).edx & (1 << 19) != 0;
    let ext = __cpuid(0x8000_0000).eax;
    let tsc = ext >= 0x8000_0001 && __cpuid(0x8000_0001).edx & (1 << 27) != 0;
    Capabilities { clflush, tsc, rtm: crate::dropit::rtm::available(), cpus: super::available_cpus() }
}

#[cfg(not(target_arch = "x86_64"))]
pub fn capabilities() -> Capabilities {
    Capabilities { clflush: false, tsc: false, rtm: false, cpus: super::available_cpus() }
}

/// Serialised time-stamp counter read.
#[cfg(target_arch = "x86_64")]
#[inline(always)]
pub fn cycles() -> u64 {
    use std::arch::x86_64::{__rdtscp, _mm_lfence};
    let mut aux = 0u32;
    // SAFETY: only called after capabilities() reported rdtscp, or in code
    // reached through an HwProbe, which checks it.
    unsafe {
        _mm_lfence();
        let t = __rdtscp(&mut aux);
        _mm_lfence();
        t
    }
}

#[cfg(not(target_arch = "x86_64"))]
pub fn cycles() -> u64 {
    use std::sync::OnceLock;
    use std::time::Instant;
    static START: OnceLock<Instant> = OnceLock::new();
    START.get_or_init(Instant::now).elapsed().as_nanos() as u64
}

/// # Safety
/// `p` must be valid for reads.
#[cfg(target_arch = "x86_64")]
#[inline(always)]
pub unsafe fn flush(p: *const u8) {
    use std::arch::x86_64::{_mm_clflush, _mm_mfence};
    _mm_clflush(p);
    _mm_mfence();
}

#[cfg(not(target_arch = "x86_64"))]
pub unsafe fn flush(_p: *const u8) {}

/// # Safety
/// `p` must be valid for reads.
#[inline(always)]
pub unsafe fn load(p: *const u8) -> u8 {
    std::ptr::read_volatile(p)
}

/// Latency of one load from `p`, in cycles.
///
/// # Safety
/// `p` must be valid for reads.
#[inline(always)]
pub unsafe fn timed_load(p: *const u8) -> u64 {
    let t0 = cycles();
    load(p);
    cycles().saturating_sub(t0)
}
