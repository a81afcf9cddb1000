use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use dfscope_core::dropit::{bench_switch, protected, TxStats};
use dfscope_core::hw::TICKS_PER_FR_CYCLE;
use dfscope_core::sim::{derive_seed, replay, AdversaryProgram, Schedule, ScheduleActor};
use dfscope_core::targets::{corpus, lookup, registry, TargetDescriptor};
use dfscope_core::trigger::{corrupted_fraction, exploit_trials, payload};
use dfscope_core::{
    detection_probability_of, is_double_fetch, monitor_invoke, run_campaign, Backend, BackendKind, CampaignConfig,
    Error, ExploitMethod, ExploitRequest, MonitorConfig, MutationStrategy, TxBackend, TxStatus, Verdict,
};

use crate::config::{config_hash, FileConfig, RunConfig};
use crate::gaps::GapSpec;
use crate::output::{emit, Stamp};
use crate::{Cli, Command, Global, TargetsAction};

struct Ctx<'a> {
    g: &'a Global,
    file: &'a FileConfig,
    rc: RunConfig,
    backend: Backend,
}

impl Ctx<'_> {
    fn stamp(&self, command: &str, params: &impl Serialize) -> Stamp {
        let hash = config_hash(&json!({ "command": command, "run": &self.rc, "params": params }));
        Stamp { seed: self.rc.seed, config_hash: hash }
    }

    fn json_out(&self) -> Option<&Path> {
        self.g.json.as_deref()
    }

    fn csv_out(&self) -> Option<&Path> {
        self.g.csv.as_deref()
    }

    fn target(&self, flag: Option<String>, default: Option<&str>) -> Result<TargetDescriptor> {
        let id = self
            .file
            .pick(flag, "target")?
            .or(default.map(str::to_string))
            .ok_or_else(|| Error::Usage("--target is required".into()))?;
        Ok(lookup(&id)?)
    }

    /// Units of a `c`-suffixed gap: target pause ticks per flush+reload cycle.
    fn cycle(&self) -> u64 {
        match self.backend {
            Backend::Sim { .. } => self.backend.fr_cycle_cost(),
            Backend::Hw { .. } => TICKS_PER_FR_CYCLE,
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.global.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    if let Command::Targets { action: TargetsAction::List } = &cli.command {
        return targets_list(&cli.global);
    }
    let rc = RunConfig::resolve(cli.global.backend, cli.global.seed, cli.global.noise_ticks, &file)?;
    let backend = match rc.backend {
        BackendKind::Sim => Backend::sim(rc.sim.clone().expect("sim settings resolved"))?,
        BackendKind::Hw => Backend::hw()?,
    };
    let ctx = Ctx { g: &cli.global, file: &file, rc, backend };
    match cli.command {
        Command::Calibrate => calibrate(&ctx),
        Command::Detect { target, params, all_lines } => detect(&ctx, target, params, all_lines),
        Command::Sweep { target, gaps, trials } => sweep(&ctx, target, gaps, trials),
        Command::Exploit { target, methods, strategy, trials, n_checks, outcomes } => {
            exploit(&ctx, target, methods, strategy, trials, n_checks, outcomes.as_deref())
        }
        Command::Fuzz { budget, table1 } => fuzz(&ctx, budget, table1),
        Command::Protect { target, adversary, retries, tx, trials, replay } => {
            protect(&ctx, ProtectArgs { target, adversary, retries, tx, trials }, replay.as_deref())
        }
        Command::Bench { trials } => bench(&ctx, trials),
        Command::Targets { .. } => unreachable!("handled above"),
    }
}

fn targets_list(g: &Global) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        id: String,
        annotation: dfscope_core::Annotation,
        category: dfscope_core::Category,
        ref_params: Vec<usize>,
        accesses: usize,
        summary: String,
    }
    let rows: Vec<Row> = registry()
        .into_iter()
        .map(|t| Row {
            accesses: t.accesses_of(t.exploit_param),
            ref_params: t.ref_params(),
            annotation: t.annotation,
            category: t.category,
            summary: t.summary.clone(),
            id: t.id,
        })
        .collect();
    if let Some(path) = &g.json {
        let stamp = Stamp { seed: g.seed.unwrap_or(0), config_hash: config_hash(&"targets") };
        return emit(Some(path), &stamp.json(&json!({ "targets": rows }))?);
    }
    let mut text = String::new();
    for r in &rows {
        let annotation = serde_json::to_value(r.annotation)?;
        text.push_str(&format!(
            "{:<22} {:<30} {:>2}  {}\n",
            r.id,
            annotation.as_str().unwrap_or_default(),
            r.accesses,
            r.summary
        ));
    }
    emit(None, &text)
}

fn calibrate(ctx: &Ctx) -> Result<()> {
    let profile = ctx.backend.profile();
    eprintln!("threshold {} fr_cycle_cost {}", profile.threshold, profile.fr_cycle_cost);
    let stamp = ctx.stamp("calibrate", &());
    let body = json!({ "backend": ctx.rc.backend, "sim": ctx.rc.sim, "profile": profile });
    emit(ctx.json_out(), &stamp.json(&body)?)
}

fn detect(ctx: &Ctx, target: Option<String>, params: Vec<usize>, all_lines: bool) -> Result<()> {
    let t = ctx.target(target, None)?;
    let mut cfg = MonitorConfig::all_params(&t, ctx.backend.profile());
    if !params.is_empty() {
        cfg.params_to_watch = params;
    }
    cfg.monitor_all_lines = all_lines;
    let seed = ctx.rc.seed;
    let report = monitor_invoke(&ctx.backend, &t, &t.args(seed), &cfg, seed)?;
    for p in &report.per_param {
        eprintln!("{} param {}: fetch_count {}", t.id, p.param, p.fetch_count);
    }
    let double: Vec<usize> = cfg.params_to_watch.iter().copied().filter(|&p| is_double_fetch(&report, p)).collect();
    let stamp = ctx.stamp("detect", &json!({ "target": t.id, "monitor": cfg }));
    let body = json!({ "records": report.records(), "double_fetch_params": double, "report": report });
    emit(ctx.json_out(), &stamp.json(&body)?)
}

fn sweep(ctx: &Ctx, target: Option<String>, gaps: Option<GapSpec>, trials: Option<usize>) -> Result<()> {
    let t = ctx.target(target, Some("two_fetch"))?;
    let spec = match ctx.file.pick(gaps, "gaps")? {
        Some(g) => g,
        None => "0:12c:0.5c".parse()?,
    };
    let trials = ctx.file.pick(trials, "trials")?.unwrap_or(10_000);
    let cycle = ctx.cycle();
    let ticks = spec.ticks(cycle)?;
    #[derive(Serialize)]
    struct Row {
        gap_ticks: u64,
        gap_cycles: f64,
        detection_probability: f64,
    }
    let mut rows = Vec::with_capacity(ticks.len());
    for g in ticks {
        let p = detection_probability_of(&ctx.backend, &t, t.exploit_param, g, trials, derive_seed(ctx.rc.seed, g))?;
        rows.push(Row { gap_ticks: g, gap_cycles: g as f64 / cycle as f64, detection_probability: p });
    }
    let stamp = ctx.stamp(
        "sweep",
        &json!({ "target": t.id, "gaps": rows.iter().map(|r| r.gap_ticks).collect::<Vec<_>>(), "trials": trials }),
    );
    if let Some(path) = ctx.json_out() {
        emit(
            Some(path),
            &stamp.json(&json!({ "target": t.id, "trials": trials, "cycle_ticks": cycle, "rows": rows }))?,
        )?;
    }
    emit(ctx.csv_out(), &stamp.csv(&["gap_ticks", "gap_cycles", "detection_probability"], &rows)?)
}

fn parse_methods(s: &str) -> Result<Vec<ExploitMethod>> {
    if s == "all" {
        return Ok(ExploitMethod::ALL.to_vec());
    }
    s.split(',').map(|m| Ok(m.trim().parse::<ExploitMethod>()?)).collect()
}

/// `a:b` (inclusive) or a comma-separated list.
fn parse_counts(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Usage(format!("bad check counts `{s}`"));
    if let Some((a, b)) = s.split_once(':') {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad().into());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|n| n.trim().parse().map_err(|_| bad().into())).collect()
}

fn exploit(
    ctx: &Ctx,
    target: Option<String>,
    methods: Option<String>,
    strategy: Option<String>,
    trials: Option<usize>,
    n_checks: Option<String>,
    outcomes_path: Option<&Path>,
) -> Result<()> {
    let methods = parse_methods(&ctx.file.pick(methods, "methods")?.unwrap_or_else(|| "all".into()))?;
    let strategy: Option<MutationStrategy> =
        ctx.file.pick(strategy, "strategy")?.map(|s: String| s.parse()).transpose()?;
    let trials = ctx.file.pick(trials, "trials")?.unwrap_or(1000);
    if trials < 100 {
        return Err(Error::Usage("exploit needs at least 100 trials".into()).into());
    }
    // (target, n_checks, seed)
    let runs: Vec<(TargetDescriptor, Option<usize>, u64)> = match &n_checks {
        Some(spec) => parse_counts(spec)?
            .into_iter()
            .map(|n| Ok((lookup(&format!("multi_check_{n}"))?, Some(n), derive_seed(ctx.rc.seed, n as u64))))
            .collect::<Result<_>>()?,
        None => vec![(ctx.target(target, Some("dedupe_analog"))?, None, ctx.rc.seed)],
    };

    #[derive(Serialize)]
    struct Rate {
        target: String,
        method: &'static str,
        strategy: &'static str,
        n_checks: Option<usize>,
        trials: usize,
        success_rate: f64,
    }
    #[derive(Serialize)]
    struct Outcome {
        method: &'static str,
        strategy: &'static str,
        n_checks: Option<usize>,
        verdict: &'static str,
        flip_vtime: Option<u64>,
    }
    let mut rates = Vec::new();
    let mut outcomes = Vec::new();
    for (t, n, seed) in &runs {
        for &method in &methods {
            let mut req = ExploitRequest::for_target(t, method);
            if let Some(s) = strategy {
                req.strategy = s;
            }
            let out = exploit_trials(&ctx.backend, t, &req, trials, *seed)?;
            let rate = corrupted_fraction(&out);
            eprintln!("{} {method}: {rate:.4}", t.id);
            rates.push(Rate {
                target: t.id.clone(),
                method: method.as_str(),
                strategy: req.strategy.as_str(),
                n_checks: *n,
                trials,
                success_rate: rate,
            });
            outcomes.extend(out.into_iter().map(|o| Outcome {
                method: method.as_str(),
                strategy: o.strategy.as_str(),
                n_checks: *n,
                verdict: o.verdict.as_str(),
                flip_vtime: o.flip_vtime,
            }));
        }
    }
    let params = json!({
        "targets": runs.iter().map(|(t, _, _)| t.id.clone()).collect::<Vec<_>>(),
        "methods": methods.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
        "strategy": strategy.map(MutationStrategy::as_str),
        "trials": trials,
    });
    let stamp = ctx.stamp("exploit", &params);
    if let Some(path) = outcomes_path {
        let header = ["method", "strategy", "n_checks", "verdict", "flip_vtime"];
        emit(Some(path), &stamp.csv(&header, &outcomes)?)?;
    }
    if let Some(path) = ctx.json_out() {
        emit(Some(path), &stamp.json(&json!({ "rates": rates }))?)?;
    }
    let header = ["target", "method", "strategy", "n_checks", "trials", "success_rate"];
    emit(ctx.csv_out(), &stamp.csv(&header, &rates)?)
}

fn fuzz(ctx: &Ctx, budget: Option<usize>, table1: bool) -> Result<()> {
    let budget = ctx.file.pick(budget, "budget")?.unwrap_or(10_000);
    let cfg = CampaignConfig::new(budget, ctx.rc.seed);
    let report = run_campaign(&ctx.backend, &corpus(), &cfg)?;
    let stamp = ctx.stamp("fuzz", &cfg);
    let text = stamp.json(&report)?;
    if table1 {
        emit(None, &report.table1())?;
        if let Some(path) = ctx.json_out() {
            emit(Some(path), &text)?;
        }
        return Ok(());
    }
    emit(ctx.json_out(), &text)
}

struct ProtectArgs {
    target: Option<String>,
    adversary: Option<String>,
    retries: Option<u64>,
    tx: Option<String>,
    trials: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum Adversary {
    None,
    Trigger,
    Flip,
    BusyWait,
}

impl std::str::FromStr for Adversary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "none" => Ok(Adversary::None),
            "trigger" => Ok(Adversary::Trigger),
            "flip" => Ok(Adversary::Flip),
            "busy_wait" => Ok(Adversary::BusyWait),
            other => Err(Error::Usage(format!("unknown adversary `{other}` (none, trigger, flip, busy_wait)"))),
        }
    }
}

fn add_stats(into: &mut TxStats, s: &TxStats) {
    into.attempts += s.attempts;
    into.conflict_aborts += s.conflict_aborts;
    into.capacity_aborts += s.capacity_aborts;
    into.explicit_aborts += s.explicit_aborts;
    into.fallbacks += s.fallbacks;
}

fn protect(ctx: &Ctx, a: ProtectArgs, replay_path: Option<&Path>) -> Result<()> {
    let base = ctx.target(a.target, Some("naive_strcpy"))?;
    let adversary: Adversary = ctx.file.pick(a.adversary, "adversary")?.unwrap_or_else(|| "trigger".into()).parse()?;
    let retries = ctx.file.pick(a.retries, "retries")?.unwrap_or(3);
    let tx: TxBackend = ctx.file.pick(a.tx, "tx")?.unwrap_or_else(|| "emulated".into()).parse()?;
    let trials = ctx.file.pick(a.trials, "trials")?.unwrap_or(100);
    let t = protected(&base, retries, tx)?;
    let params = json!({ "target": base.id, "adversary": adversary, "retries": retries, "tx": tx, "trials": trials });

    if let Some(path) = replay_path {
        let Some(config) = ctx.backend.sim_config() else {
            return Err(Error::Usage("--replay needs the sim backend".into()).into());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let schedule = Schedule::from_json(&text)?;
        let seed = ctx.rc.seed;
        let args = base.args(seed);
        let req = ExploitRequest::for_target(&base, ExploitMethod::CacheTrigger);
        let (bad, good, _) = payload(&base, &args, &req, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let needed = schedule.entries.iter().filter(|e| e.actor == ScheduleActor::Adversary).count();
        let program = match adversary {
            Adversary::None => AdversaryProgram { steps: Vec::new(), repeat: false },
            Adversary::Trigger | Adversary::BusyWait => AdversaryProgram::single_flip(req.param, 0, bad),
            Adversary::Flip => AdversaryProgram::persistent(req.param, 0, bad, good),
        };
        let steps: Vec<_> = if program.repeat && !program.steps.is_empty() {
            program.steps.iter().cycle().take(needed).cloned().collect()
        } else {
            program.steps
        };
        if steps.len() < needed {
            return Err(Error::Usage(format!(
                "schedule has {needed} adversary steps, the adversary has {}",
                steps.len()
            ))
            .into());
        }
        let run = replay(&t, &args, &steps, &schedule, config)?;
        let stamp = ctx.stamp("protect", &json!({ "replay": schedule, "protect": params }));
        let body = json!({
            "target": t.id,
            "adversary": adversary,
            "verdict": run.verdict,
            "tx": run.tx,
            "schedule": run.schedule,
            "target_ops": run.target_ops,
        });
        return emit(ctx.json_out(), &stamp.json(&body)?);
    }

    let results: Vec<(Verdict, Option<dfscope_core::TxResult>)> = match adversary {
        Adversary::None => {
            let cfg = MonitorConfig::new(vec![t.exploit_param], ctx.backend.profile());
            (0..trials)
                .map(|i| {
                    let s = derive_seed(ctx.rc.seed, i as u64);
                    let inv = monitor_invoke(&ctx.backend, &t, &t.args(s), &cfg, s)?.invocation;
                    Ok((inv.verdict, inv.tx))
                })
                .collect::<Result<_>>()?
        }
        _ => {
            let method = match adversary {
                Adversary::Trigger => ExploitMethod::CacheTrigger,
                Adversary::Flip => ExploitMethod::ValueFlipping,
                _ => ExploitMethod::BusyWait,
            };
            let req = ExploitRequest::for_target(&t, method);
            exploit_trials(&ctx.backend, &t, &req, trials, ctx.rc.seed)?
                .into_iter()
                .map(|o| (o.verdict, o.tx))
                .collect()
        }
    };

    let mut verdicts: BTreeMap<Verdict, usize> = BTreeMap::new();
    let mut stats = TxStats::default();
    let (mut committed, mut fell_back, mut max_attempts) = (0usize, 0usize, 0u64);
    for (v, tx) in &results {
        *verdicts.entry(*v).or_default() += 1;
        if let Some(tx) = tx {
            match tx.status {
                TxStatus::Committed => committed += 1,
                TxStatus::FellBack => fell_back += 1,
            }
            max_attempts = max_attempts.max(tx.attempts);
            add_stats(&mut stats, &tx.stats);
        }
    }
    eprintln!(
        "{}: {committed} committed, {fell_back} fell back, {} corrupted",
        t.id,
        verdicts.get(&Verdict::Corrupted).unwrap_or(&0)
    );
    let stamp = ctx.stamp("protect", &params);
    let body = json!({
        "target": t.id,
        "adversary": adversary,
        "retries": retries,
        "tx_backend": tx,
        "trials": trials,
        "verdicts": verdicts,
        "committed": committed,
        "fell_back": fell_back,
        "max_attempts": max_attempts,
        "stats": stats,
    });
    emit(ctx.json_out(), &stamp.json(&body)?)
}

fn bench(ctx: &Ctx, trials: Option<usize>) -> Result<()> {
    let trials = ctx.file.pick(trials, "trials")?.unwrap_or(10_000);
    let result = bench_switch(&ctx.backend, trials)?;
    let stamp = ctx.stamp("bench", &json!({ "trials": trials }));
    let unit = match ctx.rc.backend {
        BackendKind::Sim => "ticks",
        BackendKind::Hw => "cycles",
    };
    if let Some(path) = ctx.json_out() {
        emit(Some(path), &stamp.json(&json!({ "unit": unit, "bench": result }))?)?;
    }
    let rows: Vec<_> = result.rows().iter().map(|(mode, s)| (*mode, s.mean, s.stddev)).collect();
    emit(ctx.csv_out(), &stamp.csv(&["mode", "mean_cost", "stddev"], rows)?)
}
