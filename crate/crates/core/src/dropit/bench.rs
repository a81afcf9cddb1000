//! Cost of a 5-case switch dispatch with no protection, under a spinlock,
//! and inside a transactional region.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{usage, Error, Result};
use crate::hw;
use crate::mem::{ArgRecord, ArgValue, Memory};
use crate::sim::engine::TimedRun;
use crate::sim::shim::SimShim;
use crate::sim::SimConfig;

use super::{protect, rtm, TxBackend, TxRegion};

pub const MIN_BENCH_TRIALS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostStats {
    pub mean: f64,
    pub stddev: f64,
}

impl CostStats {
    fn of(samples: &[u64]) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = samples.iter().map(|&s| s as f64).sum::<f64>() / n;
        let var = samples.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n;
        CostStats { mean, stddev: var.sqrt() }
    }
}

/// Mean cost per dispatch: virtual ticks on sim, cycles on hw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchBench {
    pub trials: usize,
    pub unprotected: CostStats,
    pub spinlock: CostStats,
    pub dropit: CostStats,
    /// How the dropit row was protected.
    pub tx_backend: TxBackend,
}

impl SwitchBench {
    pub fn rows(&self) -> [(&'static str, CostStats); 3] {
        [("unprotected", self.unprotected), ("spinlock", self.spinlock), ("dropit", self.dropit)]
    }
}

#[inline(always)]
fn dispatch(selector: u8, again: u8) -> u64 {
    if selector >= 5 {
        return 0;
    }
    match again {
        0 => 11,
        1 => 23,
        2 => 37,
        3 => 41,
        4 => 53,
        _ => 0,
    }
}

pub fn bench_switch(backend: &Backend, trials: usize) -> Result<SwitchBench> {
    if trials < MIN_BENCH_TRIALS {
        return Err(usage(format!("bench needs at least {MIN_BENCH_TRIALS} trials")));
    }
    match backend {
        Backend::Sim { config, .. } => Ok(bench_sim(config, trials)?),
        Backend::Hw { .. } => bench_hw(trials),
    }
}

fn sim_dispatch(m: &mut dyn Memory) -> u64 {
    let s = m.read(0, 0, 1)[0];
    let again = m.read(0, 0, 1)[0];
    dispatch(s, again)
}

fn bench_sim(config: &SimConfig, trials: usize) -> Result<SwitchBench> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samples = [Vec::with_capacity(trials), Vec::with_capacity(trials), Vec::with_capacity(trials)];
    let mut region = TxRegion::new(0, TxBackend::EmulatedTx)?;
    for _ in 0..trials {
        let args = ArgRecord::new(vec![ArgValue::Ref(vec![rng.gen_range(0..5)])]);
        for (mode, out) in samples.iter_mut().enumerate() {
            let shim = SimShim::new(config.clone(), &args)?;
            let entry = 1;
            let mut run = TimedRun::new(shim, Vec::new(), ChaCha8Rng::seed_from_u64(0), entry);
            // The shim does not put lock words or commit validation on the
            // clock, so each is charged one access here.
            let extra = match mode {
                0 => {
                    sim_dispatch(&mut run);
                    0
                }
                1 => {
                    run.tx_begin(TxBackend::LockFallback)?;
                    sim_dispatch(&mut run);
                    run.tx_commit().map_err(|c| Error::State(format!("lock region aborted: {c:?}")))?;
                    2 * config.access_ticks
                }
                _ => {
                    let (_, r) = protect(&mut region, &mut run, |m| Ok(sim_dispatch(m)), |_| 0)?;
                    r.attempts * config.access_ticks
                }
            };
            out.push(run.shim.machine.now() - entry + extra);
        }
    }
    Ok(SwitchBench {
        trials,
        unprotected: CostStats::of(&samples[0]),
        spinlock: CostStats::of(&samples[1]),
        dropit: CostStats::of(&samples[2]),
        tx_backend: TxBackend::EmulatedTx,
    })
}

/// Times `f` once, minus the cost of timing nothing.
#[inline(always)]
fn timed(overhead: u64, f: impl FnOnce() -> u64) -> (u64, u64) {
    let t0 = hw::cycles();
    let v = f();
    let t1 = hw::cycles();
    ((t1 - t0).saturating_sub(overhead), v)
}

fn bench_hw(trials: usize) -> Result<SwitchBench> {
    let caps = hw::capabilities();
    if !caps.tsc {
        return Err(Error::Capability("bench needs a serialising cycle counter (rdtscp)".into()));
    }
    let selector = AtomicU8::new(0);
    let lock = AtomicBool::new(false);
    let version = AtomicU64::new(0);
    let tx_backend = if caps.rtm { TxBackend::HardwareTx } else { TxBackend::EmulatedTx };
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut empty: Vec<u64> = (0..1000).map(|_| timed(0, || 0).0).collect();
    empty.sort_unstable();
    let overhead = empty[empty.len() / 2];

    let body = || {
        let s = selector.load(Ordering::Acquire);
        let again = selector.load(Ordering::Acquire);
        dispatch(s, again)
    };
    let mut samples = [Vec::with_capacity(trials), Vec::with_capacity(trials), Vec::with_capacity(trials)];
    let mut sink = 0u64;
    for _ in 0..trials {
        selector.store(rng.gen_range(0..5), Ordering::Release);
        let (c, v) = timed(overhead, body);
        samples[0].push(c);
        sink ^= v;
        let (c, v) = timed(overhead, || {
            while lock.compare_exchange_weak(false, true, Ordering::Acquire, Ordering::Relaxed).is_err() {
                std::hint::spin_loop();
            }
            let v = body();
            lock.store(false, Ordering::Release);
            v
        });
        samples[1].push(c);
        sink ^= v;
        let (c, v) = timed(overhead, || {
            if tx_backend == TxBackend::HardwareTx {
                hardware_region(&body)
            } else {
                loop {
                    let before = version.load(Ordering::Acquire);
                    let v = body();
                    if version.load(Ordering::Acquire) == before {
                        break v;
                    }
                }
            }
        });
        samples[2].push(c);
        sink ^= v;
    }
    std::hint::black_box(sink);
    Ok(SwitchBench {
        trials,
        unprotected: CostStats::of(&samples[0]),
        spinlock: CostStats::of(&samples[1]),
        dropit: CostStats::of(&samples[2]),
        tx_backend,
    })
}

#[cfg(target_arch = "x86_64")]
#[inline(always)]
fn hardware_region(body: &impl Fn() -> u64) -> u64 {
    // SAFETY: only reached when RTM was detected.
    unsafe {
        for _ in 0..8 {
            if rtm::xbegin() == rtm::STARTED {
                let v = body();
                rtm::xend();
                return v;
            }
        }
    }
    body()
}

#[cfg(not(target_arch = "x86_64"))]
fn hardware_region(body: &impl Fn() -> u64) -> u64 {
    body()
}
