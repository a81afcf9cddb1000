//! `dfscope`: detect, exploit and eliminate double fetches from the command
//! line.

mod commands;
mod config;
mod gaps;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dfscope_core::{BackendKind, Error};

use crate::gaps::GapSpec;

#[derive(Parser, Debug)]
#[command(name = "dfscope", version, about = "Double-fetch detection, exploitation and elimination")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Probe backend [default: $DFSCOPE_BACKEND, else sim]
    #[arg(long, global = true)]
    backend: Option<BackendKind>,
    /// Seed for every random choice; required on sim
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key = value file, overridden by flags
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra uniform delay per probe cycle (sim)
    #[arg(long, global = true)]
    noise_ticks: Option<u64>,
    /// Write the JSON report here instead of stdout
    #[arg(long, global = true)]
    json: Option<PathBuf>,
    /// Write CSV data here instead of stdout
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Measure hit and miss latencies and the flush+reload cost
    Calibrate,
    /// Monitor one invocation of a target
    Detect {
        #[arg(long)]
        target: Option<String>,
        /// Parameters to watch, comma separated [default: every reference parameter]
        #[arg(long, value_delimiter = ',')]
        params: Vec<usize>,
        /// Watch every cache line of each parameter
        #[arg(long)]
        all_lines: bool,
    },
    /// Detection probability over a range of inter-access gaps
    Sweep {
        #[arg(long)]
        target: Option<String>,
        /// start:end:step in ticks, or in flush+reload cycles with a `c` suffix
        #[arg(long)]
        gaps: Option<GapSpec>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Success rate of the exploitation methods
    Exploit {
        #[arg(long)]
        target: Option<String>,
        /// `all` or a comma-separated list of cache_trigger, busy_wait, value_flipping
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        /// Run the multi_check_N family instead of one target (e.g. `1:7` or `1,4,8`)
        #[arg(long)]
        n_checks: Option<String>,
        /// Also write one CSV row per attempt here
        #[arg(long)]
        outcomes: Option<PathBuf>,
    },
    /// Profile and exploit the corpus with a fuzzing campaign
    Fuzz {
        #[arg(long)]
        budget: Option<usize>,
        /// Print the category table (the JSON report then needs --json)
        #[arg(long)]
        table1: bool,
    },
    /// Run a target inside a transactional retry region
    Protect {
        #[arg(long)]
        target: Option<String>,
        /// none, trigger, flip or busy_wait
        #[arg(long)]
        adversary: Option<String>,
        #[arg(long)]
        retries: Option<u64>,
        /// emulated, lock or hardware
        #[arg(long)]
        tx: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        /// Replay one schedule (JSON array of {actor, step}) on the simulator
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Cost of a small switch dispatch unprotected, locked and in a region
    Bench {
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Inspect the target registry
    Targets {
        #[command(subcommand)]
        action: TargetsAction,
    },
}

#[derive(Subcommand, Debug)]
enum TargetsAction {
    /// List registered targets
    List,
}

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CAPABILITY: u8 = 3;
const EXIT_CALIBRATION: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Usage(_) | Error::Config(_)) => EXIT_USAGE,
        Some(Error::Capability(_)) => EXIT_CAPABILITY,
        Some(Error::Calibration(_)) => EXIT_CALIBRATION,
        _ => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dfscope: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
