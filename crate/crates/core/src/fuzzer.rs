//! Campaign orchestration: profile random targets with the monitor, collect
//! double-fetch candidates, and interleave exploitation attempts on them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{usage, Result};
use crate::mem::ArgRecord;
use crate::monitor::{monitor_invoke, MonitorConfig};
use crate::targets::{ParamSpec, TargetDescriptor, Verdict};
use crate::trigger::{exploit_invoke, ExploitMethod, ExploitRequest, MutationStrategy};

pub use crate::targets::Category;

/// Draws one argument record from `specs`. Pure: buffers are only allocated
/// when a backend materialises the record.
pub fn generate_args(specs: &[ParamSpec], seed: u64) -> ArgRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArgRecord::new(specs.iter().map(|s| s.draw(&mut rng)).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub budget: usize,
    pub seed: u64,
    /// Once a candidate exists, every this-many-th iteration is an exploit
    /// attempt instead of a profiling run.
    pub exploit_every: usize,
}

impl CampaignConfig {
    pub fn new(budget: usize, seed: u64) -> Self {
        CampaignConfig { budget, seed, exploit_every: 4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploitTally {
    pub attempts: usize,
    pub corrupted: usize,
    pub fault_detected: usize,
    /// Attempts the strategy could not be applied to (for example Increment
    /// on a string).
    pub rejected: usize,
    pub by_strategy: BTreeMap<MutationStrategy, usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub target: String,
    pub param: usize,
    /// Fetch count (at least 2) to number of runs that observed it.
    pub observed_fetch_counts: BTreeMap<usize, usize>,
    pub first_seen: usize,
    pub exploits: ExploitTally,
    pub label: Option<Category>,
}

impl CandidateEntry {
    fn typical_fetch_count(&self) -> usize {
        self.observed_fetch_counts
            .iter()
            .max_by_key(|(c, n)| (**n, std::cmp::Reverse(**c)))
            .map(|(c, _)| *c)
            .unwrap_or(2)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub seed: u64,
    pub budget: usize,
    pub invocations: BTreeMap<String, usize>,
    pub candidates: Vec<CandidateEntry>,
    /// Errors raised by individual runs; they never stop the campaign.
    pub faults: Vec<String>,
}

impl CampaignReport {
    pub fn candidate_targets(&self) -> BTreeSet<String> {
        self.candidates.iter().map(|c| c.target.clone()).collect()
    }

    /// Final label per target: ExploitableBug if any of its candidates was
    /// corrupted, otherwise the target's category.
    pub fn labels(&self) -> BTreeMap<String, Category> {
        let mut out = BTreeMap::new();
        for c in &self.candidates {
            let label = c.label.unwrap_or(Category::SanityCheck);
            out.entry(c.target.clone())
                .and_modify(|l: &mut Category| {
                    if label == Category::ExploitableBug {
                        *l = label;
                    }
                })
                .or_insert(label);
        }
        out
    }

    pub fn targets_labelled(&self, category: Category) -> BTreeSet<String> {
        self.labels().into_iter().filter(|(_, l)| *l == category).map(|(t, _)| t).collect()
    }

    /// Plain-text category table: one row per category with the number of
    /// targets and their names.
    pub fn table1(&self) -> String {
        let labels = self.labels();
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {:>5}  targets", "Category", "Count");
        let _ = writeln!(out, "{}", "-".repeat(60));
        let mut total = 0;
        for cat in Category::ALL {
            let names: Vec<&str> = labels.iter().filter(|(_, l)| **l == cat).map(|(t, _)| t.as_str()).collect();
            total += names.len();
            let _ = writeln!(out, "{:<22} {:>5}  {}", cat.label(), names.len(), names.join(", "));
        }
        let _ = writeln!(out, "{}", "-".repeat(60));
        let _ = writeln!(out, "{:<22} {:>5}", "Total", total);
        out
    }
}

/// Runs `budget` iterations over `registry`.
pub fn run_campaign(backend: &Backend, registry: &[TargetDescriptor], cfg: &CampaignConfig) -> Result<CampaignReport> {
    if cfg.budget == 0 {
        return Err(usage("campaign budget must be at least 1"));
    }
    if registry.is_empty() {
        return Err(usage("empty target registry"));
    }
    let every = cfg.exploit_every.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = CampaignReport {
        seed: cfg.seed,
        budget: cfg.budget,
        invocations: registry.iter().map(|t| (t.id.clone(), 0)).collect(),
        candidates: Vec::new(),
        faults: Vec::new(),
    };
    let by_id: BTreeMap<&str, &TargetDescriptor> = registry.iter().map(|t| (t.id.as_str(), t)).collect();

    for iteration in 0..cfg.budget {
        let run_seed: u64 = rng.gen();
        if !report.candidates.is_empty() && iteration % every == every - 1 {
            let idx = rng.gen_range(0..report.candidates.len());
            let strategy = *MutationStrategy::ALL.choose(&mut rng).expect("non-empty");
            exploit_candidate(backend, &by_id, &mut report, idx, strategy, run_seed);
            continue;
        }
        let target = registry.choose(&mut rng).expect("non-empty");
        *report.invocations.entry(target.id.clone()).or_default() += 1;
        let args = target.args(run_seed);
        let mcfg = MonitorConfig::all_params(target, backend.profile());
        if mcfg.params_to_watch.is_empty() {
            continue;
        }
        match monitor_invoke(backend, target, &args, &mcfg, run_seed) {
            Err(e) => report.faults.push(format!("iteration {iteration}: monitor {}: {e}", target.id)),
            Ok(m) => {
                for p in m.per_param.iter().filter(|p| p.fetch_count >= 2) {
                    match report.candidates.iter_mut().find(|c| c.target == target.id && c.param == p.param) {
                        Some(c) => *c.observed_fetch_counts.entry(p.fetch_count).or_default() += 1,
                        None => report.candidates.push(CandidateEntry {
                            target: target.id.clone(),
                            param: p.param,
                            observed_fetch_counts: BTreeMap::from([(p.fetch_count, 1)]),
                            first_seen: iteration,
                            exploits: ExploitTally::default(),
                            label: None,
                        }),
                    }
                }
            }
        }
    }

    // Every candidate gets exploit results: one attempt per strategy for
    // those the interleaving never reached.
    for idx in 0..report.candidates.len() {
        if report.candidates[idx].exploits.attempts == 0 {
            for strategy in MutationStrategy::ALL {
                let s: u64 = rng.gen();
                exploit_candidate(backend, &by_id, &mut report, idx, strategy, s);
            }
        }
    }
    for c in &mut report.candidates {
        let category = by_id.get(c.target.as_str()).map(|t| t.category).unwrap_or(Category::SanityCheck);
        c.label = Some(if c.exploits.corrupted > 0 { Category::ExploitableBug } else { category });
    }
    Ok(report)
}

fn exploit_candidate(
    backend: &Backend,
    by_id: &BTreeMap<&str, &TargetDescriptor>,
    report: &mut CampaignReport,
    idx: usize,
    strategy: MutationStrategy,
    seed: u64,
) {
    let c = &report.candidates[idx];
    let Some(target) = by_id.get(c.target.as_str()) else {
        return;
    };
    let mut req = ExploitRequest::new(c.param, strategy, ExploitMethod::CacheTrigger);
    req.trigger_after = Some(c.typical_fetch_count() - 1);
    let args = target.args(seed);
    let result = exploit_invoke(backend, target, &args, &req, seed);
    let c = &mut report.candidates[idx];
    c.exploits.attempts += 1;
    *c.exploits.by_strategy.entry(strategy).or_default() += 1;
    match result {
        Ok(o) => match o.verdict {
            Verdict::Corrupted => c.exploits.corrupted += 1,
            Verdict::FaultDetected => c.exploits.fault_detected += 1,
            Verdict::Benign => {}
        },
        Err(e) => {
            c.exploits.rejected += 1;
            let msg = format!("exploit {} param {} {}: {e}", c.target, c.param, strategy);
            if !report.faults.contains(&msg) {
                report.faults.push(msg);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimConfig;
    use crate::targets::lookup;

    #[test]
    fn generate_args_is_pure() {
        let t = lookup("dedupe_analog").unwrap();
        assert_eq!(generate_args(&t.params, 5), generate_args(&t.params, 5));
    }

    #[test]
    fn single_fetch_registry_has_no_candidates() {
        let b = Backend::sim(SimConfig::with_seed(1)).unwrap();
        let reg = vec![lookup("single_fetch").unwrap()];
        let r = run_campaign(&b, &reg, &CampaignConfig::new(200, 3)).unwrap();
        assert!(r.candidates.is_empty());
        assert_eq!(r.invocations["single_fetch"], 200);
    }

    #[test]
    fn zero_budget_is_rejected() {
        let b = Backend::sim(SimConfig::with_seed(1)).unwrap();
        let reg = vec![lookup("single_fetch").unwrap()];
        assert!(run_campaign(&b, &reg, &CampaignConfig::new(0, 3)).is_err());
    }
}
