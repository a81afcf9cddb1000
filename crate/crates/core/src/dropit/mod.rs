//! Transactional retry regions.
//!
//! A region runs a body that fetches shared parameters; the body either
//! commits having seen one consistent snapshot of every line it read, or is
//! rolled back and retried. After the retry budget the fallback runs once.

mod bench;
pub mod rtm;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::mem::Memory;
use crate::targets::{BlackBox, Invocation, TargetDescriptor, Timing, Verdict};

pub use bench::{bench_switch, CostStats, SwitchBench};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxBackend {
    /// Restricted transactional memory on the host CPU.
    HardwareTx,
    /// Per-line versioning validated at commit.
    EmulatedTx,
    /// Locks the parameters for the whole body; concurrent writers wait.
    LockFallback,
}

impl TxBackend {
    pub fn as_str(self) -> &'static str {
        match self {
            TxBackend::HardwareTx => "hardware",
            TxBackend::EmulatedTx => "emulated",
            TxBackend::LockFallback => "lock",
        }
    }
}

impl std::str::FromStr for TxBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hardware" | "hw" | "rtm" => Ok(TxBackend::HardwareTx),
            "emulated" | "stm" => Ok(TxBackend::EmulatedTx),
            "lock" => Ok(TxBackend::LockFallback),
            other => Err(usage(format!("unknown transaction backend `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortCause {
    Conflict,
    /// Never produced by the emulated backend.
    Capacity,
    Explicit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxStatus {
    Committed,
    FellBack,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxStats {
    pub attempts: u64,
    pub conflict_aborts: u64,
    pub capacity_aborts: u64,
    pub explicit_aborts: u64,
    pub fallbacks: u64,
}

impl TxStats {
    pub fn aborts(&self) -> u64 {
        self.conflict_aborts + self.capacity_aborts + self.explicit_aborts
    }

    fn record(&mut self, cause: AbortCause) {
        match cause {
            AbortCause::Conflict => self.conflict_aborts += 1,
            AbortCause::Capacity => self.capacity_aborts += 1,
            AbortCause::Explicit => self.explicit_aborts += 1,
        }
    }

    fn merge(&mut self, other: &TxStats) {
        self.attempts += other.attempts;
        self.conflict_aborts += other.conflict_aborts;
        self.capacity_aborts += other.capacity_aborts;
        self.explicit_aborts += other.explicit_aborts;
        self.fallbacks += other.fallbacks;
    }
}

/// Outcome of one protected execution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxResult {
    pub status: TxStatus,
    pub attempts: u64,
    pub stats: TxStats,
}

/// Retry budget and backend. Stats accumulate over every `protect` call.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxRegion {
    retries: u64,
    backend: TxBackend,
    stats: TxStats,
}

impl TxRegion {
    /// Fails with a capability error for `HardwareTx` on a CPU without RTM.
    pub fn new(retries: u64, backend: TxBackend) -> Result<Self> {
        if backend == TxBackend::HardwareTx && !rtm::available() {
            return Err(Error::Capability("hardware transactional memory (RTM) is not available on this CPU".into()));
        }
        Ok(TxRegion { retries, backend, stats: TxStats::default() })
    }

    pub fn retries(&self) -> u64 {
        self.retries
    }

    pub fn backend(&self) -> TxBackend {
        self.backend
    }

    pub fn stats(&self) -> &TxStats {
        &self.stats
    }
}

/// Runs `body` atomically with respect to concurrent writers of the
/// parameters behind `mem`, retrying on conflict up to the region's budget
/// and running `fallback` once after that.
///
/// An error from `body` aborts the attempt, discards its writes and is
/// returned as is.
pub fn protect<T>(
    region: &mut TxRegion,
    mem: &mut dyn Memory,
    mut body: impl FnMut(&mut dyn Memory) -> Result<T>,
    fallback: impl FnOnce(&mut dyn Memory) -> T,
) -> Result<(T, TxResult)> {
    if mem.in_tx() {
        return Err(usage("transactional regions do not nest"));
    }
    let mut stats = TxStats::default();
    let outcome = if region.backend == TxBackend::HardwareTx && mem.native() {
        rtm::run(region.retries, mem, &mut body, &mut stats)
    } else {
        run_shim(region.retries, region.backend, mem, &mut body, &mut stats)
    };
    let result = match outcome {
        Err(e) => {
            region.stats.merge(&stats);
            return Err(e);
        }
        Ok(Some(value)) => (value, TxStatus::Committed),
        Ok(None) => {
            stats.fallbacks += 1;
            (fallback(mem), TxStatus::FellBack)
        }
    };
    region.stats.merge(&stats);
    Ok((result.0, TxResult { status: result.1, attempts: stats.attempts, stats }))
}

fn run_shim<T>(
    retries: u64,
    backend: TxBackend,
    mem: &mut dyn Memory,
    body: &mut dyn FnMut(&mut dyn Memory) -> Result<T>,
    stats: &mut TxStats,
) -> Result<Option<T>> {
    for _ in 0..=retries {
        stats.attempts += 1;
        mem.tx_begin(backend)?;
        match body(mem) {
            Err(e) => {
                mem.tx_abort();
                return Err(e);
            }
            Ok(value) => match mem.tx_commit() {
                Ok(()) => return Ok(Some(value)),
                Err(cause) => stats.record(cause),
            },
        }
    }
    Ok(None)
}

/// Wraps a target's whole invocation in a region. The fallback reports
/// `FaultDetected`.
struct Protected {
    inner: TargetDescriptor,
    region: TxRegion,
}

impl BlackBox for Protected {
    fn invoke(&self, mem: &mut dyn Memory, timing: &Timing) -> Result<Invocation> {
        let mut region = self.region.clone();
        let body = self.inner.body();
        let (inv, tx) =
            protect(&mut region, mem, |m| body.invoke(m, timing), |_| Invocation::new(Verdict::FaultDetected))?;
        Ok(Invocation { tx: Some(tx), ..inv })
    }
}

/// The target with its invocation wrapped in a fresh region per call.
pub fn protected(target: &TargetDescriptor, retries: u64, backend: TxBackend) -> Result<TargetDescriptor> {
    let region = TxRegion::new(retries, backend)?;
    let body = Arc::new(Protected { inner: target.clone(), region });
    Ok(target.with_body(format!("{}+dropit", target.id), body))
}

/// `naive_strcpy` with its fetch, check and copy inside a region.
pub fn protected_strcpy(retries: u64, backend: TxBackend) -> Result<TargetDescriptor> {
    let base = crate::targets::lookup("naive_strcpy")?;
    protected(&base, retries, backend)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::ArgRecord;
    use crate::sim::engine::TimedRun;
    use crate::sim::shim::SimShim;
    use crate::sim::SimConfig;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run() -> TimedRun {
        let args = ArgRecord::new(vec![crate::mem::ArgValue::Ref(vec![7; 8])]);
        let shim = SimShim::new(SimConfig::with_seed(1), &args).unwrap();
        TimedRun::new(shim, Vec::new(), ChaCha8Rng::seed_from_u64(1), 1)
    }

    #[test]
    fn quiet_body_commits_first_time() {
        let mut mem = run();
        let mut region = TxRegion::new(3, TxBackend::EmulatedTx).unwrap();
        let (v, r) = protect(&mut region, &mut mem, |m| Ok(m.read(0, 0, 1)[0]), |_| 0).unwrap();
        assert_eq!(v, 7);
        assert_eq!((r.status, r.attempts), (TxStatus::Committed, 1));
        assert_eq!(r.stats.fallbacks, 0);
    }

    #[test]
    fn body_error_propagates_after_rollback() {
        let mut mem = run();
        let mut region = TxRegion::new(3, TxBackend::EmulatedTx).unwrap();
        let r: Result<(u8, _)> = protect(
            &mut region,
            &mut mem,
            |m| {
                m.write(0, 0, &[1]);
                Err(Error::State("boom".into()))
            },
            |_| 0,
        );
        assert_eq!(r.unwrap_err(), Error::State("boom".into()));
        assert!(!mem.in_tx());
        assert_eq!(mem.read(0, 0, 1)[0], 7);
    }

    #[test]
    fn nesting_is_rejected() {
        let mut mem = run();
        let mut outer = TxRegion::new(0, TxBackend::EmulatedTx).unwrap();
        let r = protect(
            &mut outer,
            &mut mem,
            |m| {
                let mut inner = TxRegion::new(0, TxBackend::EmulatedTx).unwrap();
                protect(&mut inner, m, |_| Ok(()), |_| ()).map(|_| ())
            },
            |_| (),
        );
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn hardware_region_needs_rtm() {
        match TxRegion::new(1, TxBackend::HardwareTx) {
            Ok(_) => assert!(rtm::available()),
            Err(e) => assert!(matches!(e, Error::Capability(_))),
        }
    }

    #[test]
    fn backend_names_round_trip() {
        for b in [TxBackend::HardwareTx, TxBackend::EmulatedTx, TxBackend::LockFallback] {
            assert_eq!(b.as_str().parse::<TxBackend>().unwrap(), b);
        }
    }
}
