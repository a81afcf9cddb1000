//! Double-fetch detection, exploitation and elimination.
//!
//! Three primitives built on a cache side channel:
//!
//! * [`monitor`] watches reference parameters of a black box with
//!   Flush+Reload and counts distinct fetches per invocation.
//! * [`trigger`] uses the first observed fetch as the cue to flip the value
//!   before the next fetch.
//! * [`dropit`] wraps a multi-fetch section in a transactional retry region so
//!   that it either observes one consistent snapshot or runs a fallback.
//!
//! Everything runs on two backends. The simulator ([`sim`]) gives a
//! deterministic virtual cache and logical clock, which makes every claim
//! checkable without special hardware. The hardware backend ([`hw`]) uses
//! `clflush` and the time-stamp counter on x86-64.

pub mod backend;
pub mod dropit;
pub mod error;
pub mod fuzzer;
pub mod hw;
pub mod mem;
pub mod monitor;
pub mod probe;
pub mod sim;
pub mod targets;
pub mod trigger;

pub use backend::{Backend, BackendKind};
pub use dropit::{protect, TxBackend, TxRegion, TxResult, TxStatus};
pub use error::{Error, Result};
pub use fuzzer::{generate_args, run_campaign, CampaignConfig, CampaignReport, Category};
pub use mem::{ArgRecord, ArgValue, Memory};
pub use monitor::{
    detection_probability, detection_probability_of, is_double_fetch, monitor_invoke, MonitorConfig, MonitorReport,
};
pub use probe::{CalibrationProfile, Classification, LineId, ProbeBackend, ProbeSample, SharedBuffer};
pub use sim::{SimConfig, VirtualClock};
pub use targets::{Annotation, ParamKind, ParamSpec, TargetDescriptor, Verdict};
pub use trigger::{
    exploit_invoke, multi_check_success, mutate, success_rate, ExploitMethod, ExploitOutcome, ExploitRequest,
    MutationStrategy,
};

/// Version tag written into every JSON document this crate produces.
pub const SCHEMA_VERSION: u32 = 1;
