//! Instrumented black boxes standing in for the privileged side of a
//! syscall boundary. Each target fetches its reference parameters only
//! through [`Memory`], decides its own verdict with an internal bounds or
//! canary check, and carries a ground-truth annotation.

mod corpus;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dropit::TxResult;
use crate::error::{usage, Result};
use crate::mem::{ArgRecord, ArgValue, Memory};
use crate::trigger::MutationStrategy;

pub use corpus::{corpus, lookup, registry, MAX_CHECKS, SAFE_RETRY_BUDGET, STRCPY_CAPACITY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Benign,
    Corrupted,
    FaultDetected,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Benign => "benign",
            Verdict::Corrupted => "corrupted",
            Verdict::FaultDetected => "fault_detected",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annotation {
    Exploitable,
    NonExploitableDoubleFetch,
    SingleFetch,
}

/// Report categories for double fetches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Filenames,
    SharedInOut,
    Strings,
    SanityCheck,
    StructureElements,
    ExploitableBug,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Filenames,
        Category::SharedInOut,
        Category::Strings,
        Category::SanityCheck,
        Category::StructureElements,
        Category::ExploitableBug,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Category::Filenames => "Filenames",
            Category::SharedInOut => "Shared input/output",
            Category::Strings => "Strings",
            Category::SanityCheck => "Sanity checks",
            Category::StructureElements => "Structure elements",
            Category::ExploitableBug => "Exploitable bugs",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    IntScalar,
    Buffer,
    CString,
    StructWithMembers,
    FileNameLike,
    InOutBuffer,
}

/// How valid values for a parameter are drawn.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Printable string shorter than `capacity`, NUL, then non-zero filler
    /// up to the buffer size.
    CString {
        capacity: usize,
    },
    /// Little-endian u64 in `min..=max`.
    Int {
        min: u64,
        max: u64,
    },
    Bytes,
    /// Adjacent u32 members packed from offset 0.
    Struct {
        members: usize,
    },
    /// Path-like name, NUL-terminated.
    FileName {
        max_len: usize,
    },
    /// A constant by-value scalar.
    Fixed(u64),
}

/// Filler placed after a generated string's terminator.
pub const STRING_FILLER: u8 = b'A';

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamSpec {
    pub index: usize,
    pub kind: ParamKind,
    pub size_bytes: usize,
    /// Passed by reference in a shared buffer.
    pub by_ref: bool,
    pub generator: Generator,
}

impl ParamSpec {
    /// Draws one valid value.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> ArgValue {
        let size = self.size_bytes.max(1);
        let bytes = match &self.generator {
            Generator::Fixed(v) => return if self.by_ref { ArgValue::Ref(le(*v, size)) } else { ArgValue::Value(*v) },
            Generator::Int { min, max } => {
                let v = rng.gen_range(*min..=*max);
                if !self.by_ref {
                    return ArgValue::Value(v);
                }
                le(v, size)
            }
            Generator::CString { capacity } => {
                let cap = (*capacity).min(size).max(1);
                let len = rng.gen_range(0..cap);
                let mut b = vec![STRING_FILLER; size];
                for x in b.iter_mut().take(len) {
                    *x = rng.gen_range(b'a'..=b'z');
                }
                b[len] = 0;
                b
            }
            Generator::FileName { max_len } => {
                let len = rng.gen_range(1..=(*max_len).min(size - 1).max(1));
                let mut b = vec![0u8; size];
                for (i, x) in b.iter_mut().take(len).enumerate() {
                    *x = if i % 8 == 0 { b'/' } else { rng.gen_range(b'a'..=b'z') };
                }
                b
            }
            Generator::Bytes | Generator::Struct { .. } => (0..size).map(|_| rng.gen()).collect(),
        };
        ArgValue::Ref(bytes)
    }
}

fn le(v: u64, size: usize) -> Vec<u8> {
    let mut b = v.to_le_bytes().to_vec();
    b.resize(size, 0);
    b
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Read,
    Write,
}

/// One declared access: `gap` ticks after the previous one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub param: usize,
    pub access: AccessKind,
    pub gap: u64,
}

/// Timing of a target on the virtual timeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Timing {
    /// Ticks from invocation start to the first access.
    pub lead: u64,
    /// Ticks between consecutive fetches.
    pub gap: u64,
    /// The entry point is delayed by a uniform draw from `0..=entry_spread`.
    pub entry_spread: u64,
}

/// Return value of one invocation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invocation {
    pub verdict: Verdict,
    /// Present when the invocation ran inside a transactional region.
    pub tx: Option<TxResult>,
    pub detail: Option<String>,
}

impl Invocation {
    pub fn new(verdict: Verdict) -> Self {
        Invocation { verdict, tx: None, detail: None }
    }

    pub fn with_detail(verdict: Verdict, detail: impl Into<String>) -> Self {
        Invocation { verdict, tx: None, detail: Some(detail.into()) }
    }
}

/// Target entry point.
pub trait BlackBox: Send + Sync {
    fn invoke(&self, mem: &mut dyn Memory, timing: &Timing) -> Result<Invocation>;
}

/// A registered black box.
#[derive(Clone)]
pub struct TargetDescriptor {
    pub id: String,
    pub summary: String,
    pub params: Vec<ParamSpec>,
    pub annotation: Annotation,
    /// Category reported when no exploit attempt corrupts the target.
    pub category: Category,
    pub timing: Timing,
    /// Parameter exploits flip.
    pub exploit_param: usize,
    /// Mutation used by the competitor methods.
    pub default_strategy: MutationStrategy,
    script: fn(&Timing) -> Vec<ScriptStep>,
    body: Arc<dyn BlackBox>,
}

impl fmt::Debug for TargetDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TargetDescriptor")
            .field("id", &self.id)
            .field("annotation", &self.annotation)
            .field("timing", &self.timing)
            .finish_non_exhaustive()
    }
}

impl TargetDescriptor {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        id: &str,
        summary: &str,
        params: Vec<ParamSpec>,
        annotation: Annotation,
        category: Category,
        timing: Timing,
        exploit_param: usize,
        default_strategy: MutationStrategy,
        script: fn(&Timing) -> Vec<ScriptStep>,
        body: Arc<dyn BlackBox>,
    ) -> Self {
        TargetDescriptor {
            id: id.to_string(),
            summary: summary.to_string(),
            params,
            annotation,
            category,
            timing,
            exploit_param,
            default_strategy,
            script,
            body,
        }
    }

    pub fn invoke(&self, mem: &mut dyn Memory) -> Result<Invocation> {
        self.body.invoke(mem, &self.timing)
    }

    pub fn body(&self) -> Arc<dyn BlackBox> {
        Arc::clone(&self.body)
    }

    /// Same target under a new id and entry point.
    pub fn with_body(&self, id: String, body: Arc<dyn BlackBox>) -> Self {
        TargetDescriptor { id, body, ..self.clone() }
    }

    /// Replaces the inter-fetch gap. Access order is unchanged.
    pub fn with_gap(&self, gap: u64) -> Self {
        let mut t = self.clone();
        t.timing.gap = gap;
        t
    }

    pub fn with_timing(&self, timing: Timing) -> Self {
        TargetDescriptor { timing, ..self.clone() }
    }

    /// Declared accesses on the accepting path.
    pub fn access_script(&self) -> Vec<ScriptStep> {
        (self.script)(&self.timing)
    }

    /// Declared fetches (reads or writes) of `param`.
    pub fn accesses_of(&self, param: usize) -> usize {
        self.access_script().iter().filter(|s| s.param == param).count()
    }

    pub fn ref_params(&self) -> Vec<usize> {
        self.params.iter().filter(|p| p.by_ref).map(|p| p.index).collect()
    }

    pub fn param(&self, index: usize) -> Result<&ParamSpec> {
        self.params.get(index).ok_or_else(|| usage(format!("{} has no parameter {index}", self.id)))
    }

    /// True when some parameter is accessed at least twice.
    pub fn is_multi_fetch(&self) -> bool {
        self.params.iter().any(|p| self.accesses_of(p.index) >= 2)
    }

    /// Arguments drawn with `seed`.
    pub fn args(&self, seed: u64) -> ArgRecord {
        crate::fuzzer::generate_args(&self.params, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn cstring_draws_are_terminated_and_filled() {
        let spec = ParamSpec {
            index: 0,
            kind: ParamKind::CString,
            size_bytes: 64,
            by_ref: true,
            generator: Generator::CString { capacity: 16 },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let ArgValue::Ref(b) = spec.draw(&mut rng) else { panic!() };
            let len = crate::mem::strlen(&b);
            assert!(len < 16);
            assert_eq!(b.len(), 64);
            assert!(b[len + 1..].iter().all(|&x| x == STRING_FILLER));
        }
    }

    #[test]
    fn int_draws_stay_in_range() {
        let spec = ParamSpec {
            index: 0,
            kind: ParamKind::IntScalar,
            size_bytes: 8,
            by_ref: true,
            generator: Generator::Int { min: 1, max: 16 },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let ArgValue::Ref(b) = spec.draw(&mut rng) else { panic!() };
            let v = u64::from_le_bytes(b[..8].try_into().unwrap());
            assert!((1..=16).contains(&v));
        }
    }
}
