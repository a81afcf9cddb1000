use std::collections::BTreeMap;

use crate::dropit::{AbortCause, TxBackend};
use crate::error::{usage, Result};
use crate::mem::{ArgRecord, ArgValue};
use crate::probe::LineId;

use super::{Actor, BufferId, Machine, SimConfig};

#[derive(Clone, Debug)]
pub(crate) enum Binding {
    Buffer { id: BufferId, len: usize },
    Scalar(u64),
}

#[derive(Clone, Debug)]
struct TxState {
    backend: TxBackend,
    reads: BTreeMap<LineId, u64>,
    writes: Vec<(usize, usize, Vec<u8>)>,
    doomed: bool,
    locked: Vec<BufferId>,
}

/// Target-side view of a [`Machine`]: parameter bindings plus the
/// transactional read/write sets of an open region.
#[derive(Clone, Debug)]
pub(crate) struct SimShim {
    pub machine: Machine,
    pub params: Vec<Binding>,
    tx: Option<TxState>,
}

impl SimShim {
    pub fn new(config: SimConfig, args: &ArgRecord) -> Result<Self> {
        let mut machine = Machine::new(config);
        let mut params = Vec::with_capacity(args.values.len());
        for value in &args.values {
            params.push(match value {
                ArgValue::Ref(bytes) => {
                    let id = machine.allocate(bytes.len().max(1))?;
                    machine.load(id, bytes);
                    Binding::Buffer { id, len: bytes.len() }
                }
                ArgValue::Value(v) => Binding::Scalar(*v),
            });
        }
        Ok(SimShim { machine, params, tx: None })
    }

    pub fn buffer(&self, param: usize) -> Result<BufferId> {
        match self.params.get(param) {
            Some(Binding::Buffer { id, .. }) => Ok(*id),
            Some(Binding::Scalar(_)) => Err(usage(format!("parameter {param} is passed by value"))),
            None => Err(usage(format!("no parameter {param}"))),
        }
    }

    fn buffer_ids(&self) -> Vec<BufferId> {
        self.params
            .iter()
            .filter_map(|b| match b {
                Binding::Buffer { id, .. } => Some(*id),
                Binding::Scalar(_) => None,
            })
            .collect()
    }

    pub fn scalar(&self, param: usize) -> u64 {
        match self.params.get(param) {
            Some(Binding::Scalar(v)) => *v,
            _ => panic!("parameter {param} is not a by-value scalar"),
        }
    }

    pub fn param_len(&self, param: usize) -> usize {
        match self.params.get(param) {
            Some(Binding::Buffer { len, .. }) => *len,
            _ => 0,
        }
    }

    fn actor(&self) -> Actor {
        if self.tx.is_some() {
            Actor::TxBody
        } else {
            Actor::Target
        }
    }

    /// Target fetch at slot `at` or later.
    pub fn read(&mut self, param: usize, offset: usize, len: usize, at: u64) -> Vec<u8> {
        let id = self.buffer(param).expect("targets only fetch reference parameters");
        let actor = self.actor();
        let (mut bytes, _) = self.machine.read(id, offset, len, actor, at);
        if let Some(tx) = self.tx.as_mut() {
            if tx.backend != TxBackend::LockFallback {
                for &line in self.machine.shared(id).lines_in(offset, len) {
                    let version = self.machine.version(line).expect("registered line");
                    match tx.reads.get(&line) {
                        Some(&seen) if seen != version => tx.doomed = true,
                        Some(_) => {}
                        None => {
                            tx.reads.insert(line, version);
                        }
                    }
                }
                for (p, off, data) in &tx.writes {
                    if *p != param {
                        continue;
                    }
                    for (i, &b) in data.iter().enumerate() {
                        let pos = off + i;
                        if pos >= offset && pos < offset + bytes.len() {
                            bytes[pos - offset] = b;
                        }
                    }
                }
            }
        }
        bytes
    }

    pub fn write(&mut self, param: usize, offset: usize, bytes: &[u8], at: u64) {
        let id = self.buffer(param).expect("targets only store to reference parameters");
        match self.tx.as_mut() {
            Some(tx) if tx.backend != TxBackend::LockFallback => {
                tx.writes.push((param, offset, bytes.to_vec()));
            }
            _ => {
                let actor = self.actor();
                self.machine.write(id, offset, bytes, actor, at);
            }
        }
    }

    pub fn begin(&mut self, backend: TxBackend) -> Result<()> {
        if self.tx.is_some() {
            return Err(usage("transactional regions do not nest"));
        }
        let mut locked = Vec::new();
        if backend == TxBackend::LockFallback {
            locked = self.buffer_ids();
            self.machine.lock(&locked);
        }
        self.tx = Some(TxState { backend, reads: BTreeMap::new(), writes: Vec::new(), doomed: false, locked });
        Ok(())
    }

    pub fn commit(&mut self, at: u64) -> std::result::Result<(), AbortCause> {
        let Some(tx) = self.tx.take() else {
            return Err(AbortCause::Explicit);
        };
        if tx.backend == TxBackend::LockFallback {
            self.machine.unlock(&tx.locked);
            return Ok(());
        }
        let consistent = !tx.doomed
            && tx.reads.iter().all(|(&line, &v)| self.machine.version(line).map(|cur| cur == v).unwrap_or(false));
        if !consistent {
            return Err(AbortCause::Conflict);
        }
        for (param, offset, bytes) in tx.writes {
            let id = self.buffer(param).expect("reference parameter");
            self.machine.write(id, offset, &bytes, Actor::TxBody, at);
        }
        Ok(())
    }

    pub fn abort(&mut self) {
        if let Some(tx) = self.tx.take() {
            if tx.backend == TxBackend::LockFallback {
                self.machine.unlock(&tx.locked);
            }
        }
    }

    pub fn in_tx(&self) -> bool {
        self.tx.is_some()
    }
}
