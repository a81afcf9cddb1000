use std::sync::Arc;

use crate::error::{usage, Result};
use crate::mem::{read_u32, read_u64, strlen, Memory};
use crate::trigger::MutationStrategy;

use super::{
    AccessKind, Annotation, BlackBox, Category, Generator, Invocation, ParamKind, ParamSpec, ScriptStep,
    TargetDescriptor, Timing, Verdict,
};

/// Destination capacity of `naive_strcpy`, terminator included.
pub const STRCPY_CAPACITY: usize = 16;
/// Attempts `safe_retry_copy` makes before giving up.
pub const SAFE_RETRY_BUDGET: usize = 8;
/// Largest `multi_check` family member.
pub const MAX_CHECKS: usize = 8;

const DEDUPE_MAX_RECORDS: u64 = 16;
const DEDUPE_RECORD_BYTES: usize = 4;
const SWITCH_CASES: u64 = 5;
const FILENAME_READS: usize = 7;
const STRING_BYTES: usize = 64;

fn read(param: usize, gap: u64) -> ScriptStep {
    ScriptStep { param, access: AccessKind::Read, gap }
}

fn write(param: usize, gap: u64) -> ScriptStep {
    ScriptStep { param, access: AccessKind::Write, gap }
}

fn cstring(capacity: usize) -> ParamSpec {
    ParamSpec {
        index: 0,
        kind: ParamKind::CString,
        size_bytes: STRING_BYTES,
        by_ref: true,
        generator: Generator::CString { capacity },
    }
}

fn int_ref(index: usize, min: u64, max: u64) -> ParamSpec {
    ParamSpec { index, kind: ParamKind::IntScalar, size_bytes: 8, by_ref: true, generator: Generator::Int { min, max } }
}

fn timing(lead: u64, gap: u64, entry_spread: u64) -> Timing {
    Timing { lead, gap, entry_spread }
}

/// Length check on the first fetch, copy on the second.
struct NaiveStrcpy;

impl BlackBox for NaiveStrcpy {
    fn invoke(&self, mem: &mut dyn Memory, t: &Timing) -> Result<Invocation> {
        let len = strlen(&mem.read(0, 0, STRING_BYTES));
        if len >= STRCPY_CAPACITY {
            return Ok(Invocation::with_detail(Verdict::Benign, "rejected: string too long"));
        }
        mem.pause(t.gap);
        let src = mem.read(0, 0, STRING_BYTES);
        // strcpy copies through the terminator of what it reads now
        let copied = strlen(&src) + 1;
        if copied > STRCPY_CAPACITY {
            return Ok(Invocation::with_detail(
                Verdict::Corrupted,
                format!("canary overwritten: {copied} bytes copied"),
            ));
        }
        Ok(Invocation::new(Verdict::Benign))
    }
}

fn two_reads(t: &Timing) -> Vec<ScriptStep> {
    vec![read(0, 0), read(0, t.gap)]
}

/// Length, copy of length + 1 bytes, termination and length recheck, retry.
struct SafeRetryCopy;

impl BlackBox for SafeRetryCopy {
    fn invoke(&self, mem: &mut dyn Memory, t: &Timing) -> Result<Invocation> {
        for _ in 0..SAFE_RETRY_BUDGET {
            let len = strlen(&mem.read(0, 0, STRING_BYTES)).min(STRING_BYTES - 1);
            mem.pause(t.gap);
            // the local copy is exactly len + 1 bytes, so it cannot overflow
            let copy = mem.read(0, 0, len + 1);
            if copy[len] == 0 && strlen(&copy) == len {
                return Ok(Invocation::new(Verdict::Benign));
            }
        }
        Ok(Invocation::with_detail(Verdict::FaultDetected, "too many retries"))
    }
}

/// Count fetched for the allocation and again for the iteration.
struct DedupeAnalog;

impl BlackBox for DedupeAnalog {
    fn invoke(&self, mem: &mut dyn Memory, t: &Timing) -> Result<Invocation> {
        let allocated = read_u64(mem, 0);
        if allocated == 0 || allocated > DEDUPE_MAX_RECORDS {
            return Ok(Invocation::with_detail(Verdict::Benign, "rejected: bad count"));
        }
        mem.pause(t.gap);
        let count = read_u64(mem, 0);
        let records = count.min(DEDUPE_MAX_RECORDS) as usize;
        mem.read(1, 0, records * DEDUPE_RECORD_BYTES);
        if count > allocated {
            return Ok(Invocation::with_detail(
                Verdict::Corrupted,
                format!("iterated {count} records over a table of {allocated}"),
            ));
        }
        Ok(Invocation::new(Verdict::Benign))
    }
}

fn dedupe_script(t: &Timing) -> Vec<ScriptStep> {
    vec![read(0, 0), read(0, t.gap), read(1, 1)]
}

/// Bounds check on the first fetch, table dispatch on the second.
struct SwitchJumpTable;

impl BlackBox for SwitchJumpTable {
    fn invoke(&self, mem: &mut dyn Memory, t: &Timing) -> Result<Invocation> {
        let checked = read_u64(mem, 0);
        if checked >= SWITCH_CASES {
            return Ok(Invocation::with_detail(Verdict::Benign, "default case"));
        }
        mem.pause(t.gap);
        let index = read_u64(mem, 0);
        if index >= SWITCH_CASES {
            return Ok(Invocation::with_detail(Verdict::Corrupted, format!("jump table indexed at {index}")));
        }
        if index != checked {
            return Ok(Invocation::with_detail(
                Verdict::Benign,
                format!("wrong case {index} dispatched for {checked}"),
            ));
        }
        Ok(Invocation::new(Verdict::Benign))
    }
}

/// `n` equal checks, then a use that must not exceed them.
struct MultiCheck;

impl BlackBox for MultiCheck {
    fn invoke(&self, mem: &mut dyn Memory, t: &Timing) -> Result<Invocation> {
        let n = mem.scalar(1);
        if !(1..=MAX_CHECKS as u64).contains(&n) {
            return Err(usage(format!("n_checks must be in 1..={MAX_CHECKS}, got {n}")));
        }
        let first = read_u64(mem, 0);
        for _ in 1..n {
            mem.pause(t.gap);
            if read_u64(mem, 0) != first {
                return Ok(Invocation::with_detail(Verdict::Benign, "rejected: checks disagree"));
            }
        }
        mem.pause(t.gap);
        let used = read_u64(mem, 0);
        if used > first {
            return Ok(Invocation::with_detail(Verdict::Corrupted, format!("used {used} after checking {first}")));
        }
        Ok(Invocation::new(Verdict::Benign))
    }
}

fn multi_script<const N: usize>(t: &Timing) -> Vec<ScriptStep> {
    let mut s = vec![read(0, 0)];
    s.extend((0..N).map(|_| read(0, t.gap)));
    s
}

/// Two fetches, each validated before use.
struct SanityOk;

impl BlackBox for SanityOk {
    fn invoke(&self, mem: &mut dyn Memory, t: &Timing) -> Result<Invocation> {
        let valid = 1..=DEDUPE_MAX_RECORDS;
        let first = read_u64(mem, 0);
        if !valid.contains(&first) {
            return Ok(Invocation::with_detail(Verdict::Benign, "rejected"));
        }
        mem.pause(t.gap);
        let second = read_u64(mem, 0);
        if !valid.contains(&second) || second != first {
            return Ok(Invocation::with_detail(Verdict::FaultDetected, "value changed between fetches"));
        }
        Ok(Invocation::new(Verdict::Benign))
    }
}

/// Reads a request, writes the reply into the same buffer.
struct InOutBuffer;

impl BlackBox for InOutBuffer {
    fn invoke(&self, mem: &mut dyn Memory, t: &Timing) -> Result<Invocation> {
        let request = mem.read(0, 0, 8);
        mem.pause(t.gap);
        let reply: Vec<u8> = request.iter().map(|b| b.wrapping_add(1)).collect();
        mem.write(0, 0, &reply);
        Ok(Invocation::new(Verdict::Benign))
    }
}

fn read_then_write(t: &Timing) -> Vec<ScriptStep> {
    vec![read(0, 0), write(0, t.gap)]
}

/// Two members that share one line, each read once.
struct StructMembers;

impl BlackBox for StructMembers {
    fn invoke(&self, mem: &mut dyn Memory, t: &Timing) -> Result<Invocation> {
        let _flags = read_u32(mem, 0, 0);
        mem.pause(t.gap);
        let _len = read_u32(mem, 0, 4);
        Ok(Invocation::new(Verdict::Benign))
    }
}

/// Reads a path name repeatedly while resolving it, then works on a private
/// copy.
struct FilenameCache;

impl BlackBox for FilenameCache {
    fn invoke(&self, mem: &mut dyn Memory, t: &Timing) -> Result<Invocation> {
        for i in 0..FILENAME_READS {
            if i > 0 {
                mem.pause(t.gap);
            }
            let name = mem.read(0, 0, STRING_BYTES);
            if strlen(&name) >= STRING_BYTES {
                return Ok(Invocation::with_detail(Verdict::Benign, "rejected: name too long"));
            }
        }
        Ok(Invocation::new(Verdict::Benign))
    }
}

fn filename_script(t: &Timing) -> Vec<ScriptStep> {
    (0..FILENAME_READS).map(|i| read(0, if i == 0 { 0 } else { t.gap })).collect()
}

struct SingleFetch;

impl BlackBox for SingleFetch {
    fn invoke(&self, mem: &mut dyn Memory, _t: &Timing) -> Result<Invocation> {
        mem.read(0, 0, 8);
        Ok(Invocation::new(Verdict::Benign))
    }
}

fn one_read(_t: &Timing) -> Vec<ScriptStep> {
    vec![read(0, 0)]
}

/// Two plain reads `gap` apart; the fixture for detection sweeps.
struct TwoFetch;

impl BlackBox for TwoFetch {
    fn invoke(&self, mem: &mut dyn Memory, t: &Timing) -> Result<Invocation> {
        mem.read(0, 0, 8);
        mem.pause(t.gap);
        mem.read(0, 0, 8);
        Ok(Invocation::new(Verdict::Benign))
    }
}

fn multi_check(n: usize) -> TargetDescriptor {
    let script: fn(&Timing) -> Vec<ScriptStep> = match n {
        1 => multi_script::<1>,
        2 => multi_script::<2>,
        3 => multi_script::<3>,
        4 => multi_script::<4>,
        5 => multi_script::<5>,
        6 => multi_script::<6>,
        7 => multi_script::<7>,
        _ => multi_script::<8>,
    };
    TargetDescriptor::new(
        &format!("multi_check_{n}"),
        "value checked n times for equality, then used; the use must not exceed the checks",
        vec![
            int_ref(0, 0, 1000),
            ParamSpec {
                index: 1,
                kind: ParamKind::IntScalar,
                size_bytes: 8,
                by_ref: false,
                generator: Generator::Fixed(n as u64),
            },
        ],
        Annotation::Exploitable,
        Category::SanityCheck,
        timing(2, 30, 30),
        0,
        MutationStrategy::Increment,
        script,
        Arc::new(MultiCheck),
    )
}

/// Every registered target, including sweep fixtures.
pub fn registry() -> Vec<TargetDescriptor> {
    let mut all = corpus();
    all.push(TargetDescriptor::new(
        "two_fetch",
        "two reads of one buffer a configurable gap apart",
        vec![ParamSpec { index: 0, kind: ParamKind::Buffer, size_bytes: 8, by_ref: true, generator: Generator::Bytes }],
        Annotation::NonExploitableDoubleFetch,
        Category::SanityCheck,
        timing(2, 30, 30),
        0,
        MutationStrategy::FlipLSB,
        two_reads,
        Arc::new(TwoFetch),
    ));
    all
}

/// The campaign corpus.
pub fn corpus() -> Vec<TargetDescriptor> {
    let mut v = vec![
        TargetDescriptor::new(
            "naive_strcpy",
            "length check on one fetch, strcpy into a 16-byte buffer on the next",
            vec![cstring(STRCPY_CAPACITY)],
            Annotation::Exploitable,
            Category::Strings,
            timing(2, 20, 30),
            0,
            MutationStrategy::FlipLSB,
            two_reads,
            Arc::new(NaiveStrcpy),
        ),
        TargetDescriptor::new(
            "safe_retry_copy",
            "length, bounded copy, termination recheck, retry",
            vec![cstring(STRING_BYTES)],
            Annotation::NonExploitableDoubleFetch,
            Category::Strings,
            timing(2, 20, 30),
            0,
            MutationStrategy::FlipLSB,
            two_reads,
            Arc::new(SafeRetryCopy),
        ),
        TargetDescriptor::new(
            "dedupe_analog",
            "record count fetched for allocation and again for iteration",
            vec![
                int_ref(0, 1, DEDUPE_MAX_RECORDS),
                ParamSpec {
                    index: 1,
                    kind: ParamKind::Buffer,
                    size_bytes: DEDUPE_MAX_RECORDS as usize * DEDUPE_RECORD_BYTES,
                    by_ref: true,
                    generator: Generator::Bytes,
                },
            ],
            Annotation::Exploitable,
            Category::SanityCheck,
            timing(6, 102, 120),
            0,
            MutationStrategy::Increment,
            dedupe_script,
            Arc::new(DedupeAnalog),
        ),
        TargetDescriptor::new(
            "switch_jump_table",
            "5-case switch whose selector is fetched for the bounds check and again for dispatch",
            vec![int_ref(0, 0, SWITCH_CASES - 1)],
            Annotation::Exploitable,
            Category::SanityCheck,
            timing(2, 15, 30),
            0,
            MutationStrategy::RandomValue,
            two_reads,
            Arc::new(SwitchJumpTable),
        ),
    ];
    v.extend((1..=MAX_CHECKS).map(multi_check));
    v.extend([
        TargetDescriptor::new(
            "sanity_ok",
            "two fetches, each validated",
            vec![int_ref(0, 1, DEDUPE_MAX_RECORDS)],
            Annotation::NonExploitableDoubleFetch,
            Category::SanityCheck,
            timing(2, 20, 30),
            0,
            MutationStrategy::Increment,
            two_reads,
            Arc::new(SanityOk),
        ),
        TargetDescriptor::new(
            "inout_buffer",
            "request read from and reply written to the same buffer",
            vec![ParamSpec {
                index: 0,
                kind: ParamKind::InOutBuffer,
                size_bytes: 8,
                by_ref: true,
                generator: Generator::Bytes,
            }],
            Annotation::NonExploitableDoubleFetch,
            Category::SharedInOut,
            timing(2, 20, 30),
            0,
            MutationStrategy::FlipLSB,
            read_then_write,
            Arc::new(InOutBuffer),
        ),
        TargetDescriptor::new(
            "struct_members",
            "two u32 members on one line, each read once",
            vec![ParamSpec {
                index: 0,
                kind: ParamKind::StructWithMembers,
                size_bytes: 8,
                by_ref: true,
                generator: Generator::Struct { members: 2 },
            }],
            Annotation::NonExploitableDoubleFetch,
            Category::StructureElements,
            timing(2, 20, 30),
            0,
            MutationStrategy::FlipLSB,
            two_reads,
            Arc::new(StructMembers),
        ),
        TargetDescriptor::new(
            "filename_cache",
            "path name read seven times during resolution",
            vec![ParamSpec {
                index: 0,
                kind: ParamKind::FileNameLike,
                size_bytes: STRING_BYTES,
                by_ref: true,
                generator: Generator::FileName { max_len: 40 },
            }],
            Annotation::NonExploitableDoubleFetch,
            Category::Filenames,
            timing(2, 20, 30),
            0,
            MutationStrategy::RandomValue,
            filename_script,
            Arc::new(FilenameCache),
        ),
        TargetDescriptor::new(
            "single_fetch",
            "one read",
            vec![ParamSpec {
                index: 0,
                kind: ParamKind::Buffer,
                size_bytes: 8,
                by_ref: true,
                generator: Generator::Bytes,
            }],
            Annotation::SingleFetch,
            Category::SanityCheck,
            timing(2, 20, 30),
            0,
            MutationStrategy::FlipLSB,
            one_read,
            Arc::new(SingleFetch),
        ),
    ]);
    v
}

pub fn lookup(id: &str) -> Result<TargetDescriptor> {
    registry()
        .into_iter()
        .find(|t| t.id == id)
        .ok_or_else(|| usage(format!("unknown target `{id}` (see `targets list`)")))
}
