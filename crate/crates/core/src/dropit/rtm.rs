//! Intel RTM (`xbegin`/`xend`/`xabort`).

use crate::error::{Error, Result};
use crate::mem::Memory;

use super::{AbortCause, TxStats};

/// Status returned by [`xbegin`] when the transaction started.
pub const STARTED: u32 = !0;

const ABORT_EXPLICIT: u32 = 1 << 0;
const ABORT_CAPACITY: u32 = 1 << 3;
/// `xabort` code used when the body returned an error.
const BODY_FAILED: u32 = 0xfe;

#[cfg(target_arch = "x86_64")]
pub fn available() -> bool {
    use std::arch::x86_64::{__cpuid, __cpuid_count};
    // cpuid is slow under a hypervisor
    static RTM: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
    *RTM.get_or_init(|| __cpuid(0).eax >= 7 && __cpuid_count(7, 0).ebx & (1 << 11) != 0)
}

#[cfg(not(target_arch = "x86_64"))]
pub fn available() -> bool {
    false
}

/// Starts a transaction. Returns [`STARTED`], or the abort status when
/// execution resumes here after an abort.
///
/// # Safety
/// The CPU must support RTM.
#[cfg(target_arch = "x86_64")]
#[inline(never)]
pub unsafe fn xbegin() -> u32 {
    let status: u32;
    std::arch::asm!("mov eax, -1", "xbegin 2f", "2:", out("eax") status, options(nostack));
    status
}

/// # Safety
/// Must be inside a transaction started by [`xbegin`].
#[cfg(target_arch = "x86_64")]
#[inline(always)]
pub unsafe fn xend() {
    std::arch::asm!("xend", options(nostack));
}

/// # Safety
/// Must be inside a transaction started by [`xbegin`].
#[cfg(target_arch = "x86_64")]
#[inline(always)]
pub unsafe fn xabort_body_failed() {
    std::arch::asm!("xabort 0xfe", options(nostack));
}

fn cause(status: u32) -> AbortCause {
    if status & ABORT_EXPLICIT != 0 {
        AbortCause::Explicit
    } else if status & ABORT_CAPACITY != 0 {
        AbortCause::Capacity
    } else {
        // Conflict bit (2) as well as interrupts and other unclassified aborts.
        AbortCause::Conflict
    }
}

#[cfg(target_arch = "x86_64")]
pub(super) fn run<T>(
    retries: u64,
    mem: &mut dyn Memory,
    body: &mut dyn FnMut(&mut dyn Memory) -> Result<T>,
    stats: &mut TxStats,
) -> Result<Option<T>> {
    if !available() {
        return Err(Error::Capability("hardware transactional memory (RTM) is not available on this CPU".into()));
    }
    for _ in 0..=retries {
        stats.attempts += 1;
        // SAFETY: RTM support checked above.
        let status = unsafe { xbegin() };
        if status == STARTED {
            match body(mem) {
                Ok(value) => {
                    // SAFETY: inside the transaction started above.
                    unsafe { xend() };
                    return Ok(Some(value));
                }
                // SAFETY: inside the transaction started above; control
                // resumes at xbegin with the explicit-abort status.
                Err(_) => unsafe { xabort_body_failed() },
            }
        }
        if status & ABORT_EXPLICIT != 0 && status >> 24 == BODY_FAILED {
            return Err(Error::State("protected body failed inside a hardware transaction".into()));
        }
        stats.record(cause(status));
    }
    Ok(None)
}

#[cfg(not(target_arch = "x86_64"))]
pub(super) fn run<T>(
    _retries: u64,
    _mem: &mut dyn Memory,
    _body: &mut dyn FnMut(&mut dyn Memory) -> Result<T>,
    _stats: &mut TxStats,
) -> Result<Option<T>> {
    Err(Error::Capability("hardware transactional memory is only supported on x86-64".into()))
}
