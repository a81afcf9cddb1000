//! Fixtures shared by the criterion benches.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};

use dfscope_core::dropit::rtm;
use dfscope_core::{Backend, SimConfig};

/// Simulator backend with the default constants.
pub fn sim_backend(seed: u64) -> Backend {
    Backend::sim(SimConfig::with_seed(seed)).expect("default sim config is valid")
}

/// A 5-case switch whose selector lives in shared memory and is fetched
/// twice: once for the bounds check and once for dispatch.
#[derive(Default)]
pub struct Switch {
    selector: AtomicU8,
    lock: AtomicBool,
    version: AtomicU64,
    // cpuid traps under virtualisation, so look it up once
    rtm: bool,
}

impl Switch {
    pub fn new(selector: u8) -> Self {
        Switch { selector: AtomicU8::new(selector), rtm: rtm::available(), ..Switch::default() }
    }

    #[inline(always)]
    pub fn unprotected(&self) -> u64 {
        let s = self.selector.load(Ordering::Acquire);
        if s >= 5 {
            return 0;
        }
        match self.selector.load(Ordering::Acquire) {
            0 => 11,
            1 => 23,
            2 => 37,
            3 => 41,
            4 => 53,
            _ => 0,
        }
    }

    pub fn spinlock(&self) -> u64 {
        while self.lock.compare_exchange_weak(false, true, Ordering::Acquire, Ordering::Relaxed).is_err() {
            std::hint::spin_loop();
        }
        let v = self.unprotected();
        self.lock.store(false, Ordering::Release);
        v
    }

    /// Hardware transaction when the CPU has RTM, otherwise a version check
    /// around the body.
    pub fn region(&self) -> u64 {
        if self.rtm {
            for _ in 0..8 {
                // SAFETY: RTM was detected above; the body neither nests
                // transactions nor performs system calls.
                unsafe {
                    if rtm::xbegin() == rtm::STARTED {
                        let v = self.unprotected();
                        rtm::xend();
                        return v;
                    }
                }
            }
        }
        loop {
            let before = self.version.load(Ordering::Acquire);
            let v = self.unprotected();
            if self.version.load(Ordering::Acquire) == before {
                return v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_mode_dispatches_the_same() {
        for sel in 0..7 {
            let s = Switch::new(sel);
            assert_eq!(s.unprotected(), s.spinlock());
            assert_eq!(s.unprotected(), s.region());
        }
        assert_eq!(Switch::new(9).unprotected(), 0);
    }
}
