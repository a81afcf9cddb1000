mod common;

use common::{payloads, sim_config, EXHAUSTIVE};
use dfscope_core::dropit::{protected, protected_strcpy};
use dfscope_core::sim::{
    replay, run_interleavings, sample_interleavings, Actor, AdversaryProgram, EventKind, InterleavingReport, Schedule,
    ScheduleActor, TargetOp,
};
use dfscope_core::targets::{corpus, lookup, Annotation, TargetDescriptor};
use dfscope_core::LineId;
use dfscope_core::{
    success_rate, Backend, ExploitMethod, ExploitRequest, MutationStrategy, SimConfig, TxBackend, TxStatus, Verdict,
};

fn exploitable() -> Vec<TargetDescriptor> {
    corpus().into_iter().filter(|t| t.annotation == Annotation::Exploitable).collect()
}

fn reports(t: &TargetDescriptor, seeds: u64, samples: usize) -> Vec<InterleavingReport> {
    let mut out = Vec::new();
    for (seed, param, bad, good) in payloads(t, seeds) {
        let args = t.args(seed);
        out.push(
            run_interleavings(
                t,
                &args,
                &AdversaryProgram::single_flip(param, 0, bad.clone()),
                EXHAUSTIVE,
                &sim_config(),
            )
            .unwrap(),
        );
        let prog = AdversaryProgram::persistent(param, 0, bad, good);
        out.push(sample_interleavings(t, &args, &prog, samples, &sim_config()).unwrap());
    }
    out
}

#[derive(Debug, PartialEq)]
enum Step {
    Read(Vec<LineId>),
    Write(LineId),
    Commit(bool),
    Other,
}

/// A committed attempt saw no adversary write to any line it had already
/// read.
#[test]
fn committed_attempts_are_atomic() {
    for base in exploitable() {
        let t = protected(&base, 3, TxBackend::EmulatedTx).unwrap();
        for r in reports(&t, 2, 300) {
            for run in &r.runs {
                let Some(tx) = &run.tx else { panic!("{}: no tx result", t.id) };
                if tx.status != TxStatus::Committed {
                    continue;
                }
                // Adversary writes are single-line, so they log one event each.
                let mut writes = run.log.iter().filter(|e| e.actor == Actor::Adversary);
                let mut steps = Vec::new();
                for e in &run.schedule.entries {
                    match e.actor {
                        ScheduleActor::Adversary => {
                            let ev = writes.next().expect("adversary write logged");
                            assert_eq!(ev.kind, EventKind::Write);
                            steps.push(Step::Write(ev.line));
                        }
                        ScheduleActor::Target => steps.push(match &run.target_ops[e.step] {
                            TargetOp::Read { lines } => Step::Read(lines.clone()),
                            TargetOp::Write { .. } => Step::Other,
                            TargetOp::Commit { committed } => Step::Commit(*committed),
                        }),
                    }
                }
                let commits: Vec<usize> =
                    steps.iter().enumerate().filter(|(_, s)| matches!(s, Step::Commit(_))).map(|(i, _)| i).collect();
                let commit = *commits.last().expect("a commit step");
                assert_eq!(steps[commit], Step::Commit(true));
                let start = commits.iter().rev().nth(1).map_or(0, |c| c + 1);
                let Some(first_read) = (start..commit).find(|&i| matches!(steps[i], Step::Read(_))) else {
                    continue;
                };
                // A line joins the read set when the attempt first reads it.
                let mut read_set = Vec::new();
                for s in &steps[first_read..commit] {
                    match s {
                        Step::Read(lines) => read_set.extend(lines.iter().copied()),
                        Step::Write(line) => assert!(
                            !read_set.contains(line),
                            "{}: write to a read line inside a committed attempt: {}",
                            t.id,
                            run.schedule.to_json()
                        ),
                        _ => {}
                    }
                }
                assert_eq!(commits.len() as u64, tx.attempts, "{}", t.id);
            }
        }
    }
}

#[test]
fn fallback_runs_at_most_once_and_only_after_the_budget() {
    for base in exploitable() {
        let retries = 2;
        let t = protected(&base, retries, TxBackend::EmulatedTx).unwrap();
        for r in reports(&t, 1, 500) {
            for run in &r.runs {
                let tx = run.tx.as_ref().unwrap();
                assert!(tx.stats.fallbacks <= 1);
                match tx.status {
                    TxStatus::FellBack => {
                        assert_eq!(tx.attempts, retries + 1);
                        assert_eq!(run.verdict, Verdict::FaultDetected);
                    }
                    TxStatus::Committed => assert_eq!(tx.stats.fallbacks, 0),
                }
            }
        }
    }
}

#[test]
fn lock_fallback_is_never_corrupted() {
    for base in exploitable() {
        let t = protected(&base, 0, TxBackend::LockFallback).unwrap();
        for r in reports(&t, 2, 1000) {
            assert_eq!(r.count(Verdict::Corrupted), 0, "{}", t.id);
        }
    }
}

#[test]
fn protected_variants_keep_benign_behaviour() {
    for base in corpus() {
        let t = protected(&base, 3, TxBackend::EmulatedTx).unwrap();
        for seed in 0..50 {
            let args = base.args(seed);
            let plain = replay(&base, &args, &[], &Schedule::default(), &sim_config()).unwrap();
            let wrapped = replay(&t, &args, &[], &Schedule::default(), &sim_config()).unwrap();
            assert_eq!(plain.verdict, wrapped.verdict, "{} seed {seed}", t.id);
            assert_eq!(wrapped.tx.unwrap().attempts, 1);
        }
    }
}

#[test]
fn protected_strcpy_examples() {
    let t = protected_strcpy(2, TxBackend::EmulatedTx).unwrap();
    let args = t.args(3);
    let quiet = replay(&t, &args, &[], &Schedule::default(), &sim_config()).unwrap();
    assert_eq!(quiet.verdict, Verdict::Benign);
    assert_eq!(quiet.tx.unwrap().attempts, 1);

    // A value that changes between every pair of fetches exhausts the budget.
    let good = args.values[0].bytes().unwrap().to_vec();
    let bad = vec![if good[0] == b'B' { b'C' } else { b'B' }, 0];
    let prog = AdversaryProgram::persistent(0, 0, bad, good);
    let steps: Vec<_> = (0..8).map(|i| prog.steps[i % 2].clone()).collect();
    let positions: Vec<_> = (1..=8).collect();
    let run = replay(&t, &args, &steps, &Schedule::from_positions(&positions, 9), &sim_config()).unwrap();
    assert_eq!(run.verdict, Verdict::FaultDetected);
    assert_eq!(run.tx.unwrap().status, TxStatus::FellBack);

    let r = sample_interleavings(&t, &args, &prog, 2000, &sim_config()).unwrap();
    assert_eq!(r.count(Verdict::Corrupted), 0);
}

#[test]
fn timed_exploits_fail_against_protected_targets() {
    let b = Backend::sim(SimConfig::with_seed(4)).unwrap();
    for base in exploitable() {
        let t = protected(&base, 3, TxBackend::EmulatedTx).unwrap();
        for method in [ExploitMethod::CacheTrigger, ExploitMethod::ValueFlipping] {
            for strategy in MutationStrategy::ALL {
                let req = ExploitRequest::new(t.exploit_param, strategy, method);
                match success_rate(&b, &t, &req, 100, 8) {
                    Ok(p) => assert_eq!(p, 0.0, "{} {method} {strategy}", t.id),
                    Err(e) => assert!(matches!(e, dfscope_core::Error::Usage(_)), "{e}"),
                }
            }
        }
    }
}

#[test]
fn nested_regions_are_rejected() {
    let inner = protected(&lookup("dedupe_analog").unwrap(), 1, TxBackend::EmulatedTx).unwrap();
    let outer = protected(&inner, 1, TxBackend::EmulatedTx).unwrap();
    let r = replay(&outer, &outer.args(1), &[], &Schedule::default(), &sim_config());
    assert!(matches!(r, Err(dfscope_core::Error::Usage(_))));
}
