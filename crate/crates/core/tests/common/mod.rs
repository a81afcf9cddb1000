#![allow(dead_code)]

use dfscope_core::sim::{run_interleavings, sample_interleavings, AdversaryProgram, InterleavingReport};
use dfscope_core::targets::TargetDescriptor;
use dfscope_core::trigger::payload;
use dfscope_core::{ExploitMethod, ExploitRequest, MutationStrategy, SimConfig, Verdict};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Enough to enumerate every single-flip interleaving of any corpus target.
pub const EXHAUSTIVE: usize = 1_000_000;

pub fn sim_config() -> SimConfig {
    SimConfig::with_seed(1)
}

/// Tally of verdicts over a set of schedules.
#[derive(Debug, Default, Clone, Copy)]
pub struct Tally {
    pub schedules: usize,
    pub corrupted: usize,
    pub fault_detected: usize,
}

impl Tally {
    pub fn add(&mut self, r: &InterleavingReport) {
        self.schedules += r.runs.len();
        self.corrupted += r.count(Verdict::Corrupted);
        self.fault_detected += r.count(Verdict::FaultDetected);
    }
}

/// Adversary payloads for `target`: every reference parameter, every strategy
/// that applies to it, over `arg_seeds` argument draws.
pub fn payloads(target: &TargetDescriptor, arg_seeds: u64) -> Vec<(u64, usize, Vec<u8>, Vec<u8>)> {
    let mut out = Vec::new();
    for seed in 0..arg_seeds {
        let args = target.args(seed);
        for param in target.ref_params() {
            for strategy in MutationStrategy::ALL {
                let req = ExploitRequest::new(param, strategy, ExploitMethod::CacheTrigger);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                if let Ok((bad, good, no_op)) = payload(target, &args, &req, &mut rng) {
                    if !no_op {
                        out.push((seed, param, bad, good));
                    }
                }
            }
        }
    }
    out
}

/// Every single-flip interleaving for every payload.
pub fn single_flip_tally(target: &TargetDescriptor, arg_seeds: u64) -> Tally {
    let mut t = Tally::default();
    for (seed, param, bad, _) in payloads(target, arg_seeds) {
        let r = run_interleavings(
            target,
            &target.args(seed),
            &AdversaryProgram::single_flip(param, 0, bad),
            EXHAUSTIVE,
            &sim_config(),
        )
        .expect("interleavings run");
        assert!(!r.sampled, "{}: single-flip enumeration was sampled", target.id);
        t.add(&r);
    }
    t
}

/// `n` sampled persistent-adversary schedules per payload.
pub fn persistent_tally(target: &TargetDescriptor, arg_seeds: u64, n: usize) -> Tally {
    let mut t = Tally::default();
    for (seed, param, bad, good) in payloads(target, arg_seeds) {
        let prog = AdversaryProgram::persistent(param, 0, bad, good);
        t.add(&sample_interleavings(target, &target.args(seed), &prog, n, &sim_config()).expect("samples run"));
    }
    t
}

pub fn binomial(n: u128, k: u128) -> u128 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}
