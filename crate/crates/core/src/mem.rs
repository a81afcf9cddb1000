//! The memory-access shim targets are written against.
//!
//! A target never touches its reference parameters directly: every fetch and
//! store goes through [`Memory`], which is what lets the same target code run
//! on the simulator, under a schedule enumerator, or on real memory shared
//! with probing threads.

use serde::{Deserialize, Serialize};

use crate::dropit::{AbortCause, TxBackend};
use crate::error::Result;

/// One argument of an invocation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArgValue {
    /// Initial contents of a reference parameter's shared buffer.
    Ref(Vec<u8>),
    /// A by-value scalar.
    Value(u64),
}

impl ArgValue {
    pub fn bytes(&self) -> Option<&[u8]> {
        match self {
            ArgValue::Ref(b) => Some(b),
            ArgValue::Value(_) => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArgRecord {
    pub values: Vec<ArgValue>,
}

impl ArgRecord {
    pub fn new(values: Vec<ArgValue>) -> Self {
        ArgRecord { values }
    }

    pub fn get(&self, index: usize) -> Option<&ArgValue> {
        self.values.get(index)
    }
}

/// Backend shim seen by target code.
pub trait Memory {
    /// Fetches `len` bytes at `offset` of reference parameter `param`.
    fn read(&mut self, param: usize, offset: usize, len: usize) -> Vec<u8>;

    fn write(&mut self, param: usize, offset: usize, bytes: &[u8]);

    /// Local computation between accesses.
    fn pause(&mut self, ticks: u64);

    /// By-value argument `param`.
    fn scalar(&self, param: usize) -> u64;

    /// Size of reference parameter `param` in bytes.
    fn param_len(&self, param: usize) -> usize;

    /// Opens a transactional region over every reference parameter.
    fn tx_begin(&mut self, backend: TxBackend) -> Result<()>;

    /// Validates and publishes the region. On `Err` the region's writes are
    /// discarded and the region is closed.
    fn tx_commit(&mut self) -> std::result::Result<(), AbortCause>;

    /// Discards the region's writes and closes it.
    fn tx_abort(&mut self);

    fn in_tx(&self) -> bool;

    /// True when parameters live in real host memory, so a hardware
    /// transaction around the body covers them.
    fn native(&self) -> bool {
        false
    }
}

pub fn read_u64(mem: &mut dyn Memory, param: usize) -> u64 {
    let bytes = mem.read(param, 0, 8);
    let mut raw = [0u8; 8];
    raw[..bytes.len()].copy_from_slice(&bytes);
    u64::from_le_bytes(raw)
}

pub fn read_u32(mem: &mut dyn Memory, param: usize, offset: usize) -> u32 {
    let bytes = mem.read(param, offset, 4);
    let mut raw = [0u8; 4];
    raw[..bytes.len()].copy_from_slice(&bytes);
    u32::from_le_bytes(raw)
}

/// Length of the NUL-terminated string in `bytes`; the whole slice when no
/// terminator is present.
pub fn strlen(bytes: &[u8]) -> usize {
    bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len())
}
