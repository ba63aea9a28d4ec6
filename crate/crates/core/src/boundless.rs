//! Overflow-tolerant memory.
//!
//! Out-of-bounds writes within a per-object horizon are redirected into an
//! overflow table instead of corrupting neighbouring objects, and matching
//! reads are served from it. Accesses that cannot be absorbed safely
//! (negative offsets, beyond the horizon, or a full table) stop the service.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::ir::{DetectReason, Heap, MemHook, Stop, Trap, Word};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SafetyPolicy {
    /// Largest tolerated distance past the declared size, in words.
    pub horizon: Word,
    /// Maximum number of overflow entries per service instance.
    pub cap: usize,
}

impl Default for SafetyPolicy {
    fn default() -> Self {
        SafetyPolicy { horizon: 4096, cap: 65536 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid safety policy: {0}")]
pub struct PolicyError(&'static str);

impl SafetyPolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.horizon < 0 {
            return Err(PolicyError("horizon must be >= 0"));
        }
        if self.cap < 1 {
            return Err(PolicyError("cap must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OobEvent {
    pub kind: AccessKind,
    pub handle: Word,
    pub offset: Word,
    pub step: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OverflowTable {
    entries: BTreeMap<(Word, Word), Word>,
    events: Vec<OobEvent>,
}

impl OverflowTable {
    pub fn entries(&self) -> &BTreeMap<(Word, Word), Word> {
        &self.entries
    }

    pub fn events(&self) -> &[OobEvent] {
        &self.events
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.events.clear();
    }
}

enum Access {
    InBounds,
    Tolerated,
}

fn classify(heap: &Heap, handle: Word, offset: Word, policy: &SafetyPolicy) -> Result<Access, Stop> {
    let obj = heap.object(handle).ok_or(Stop::Trap(Trap::InvalidHandle))?;
    if offset < 0 {
        return Err(Stop::Detect(DetectReason::UnsafeOob));
    }
    if offset < obj.size {
        return Ok(Access::InBounds);
    }
    if offset - obj.size <= policy.horizon {
        Ok(Access::Tolerated)
    } else {
        Err(Stop::Detect(DetectReason::UnsafeOob))
    }
}

pub fn mem_write(
    heap: &mut Heap,
    table: &mut OverflowTable,
    handle: Word,
    offset: Word,
    value: Word,
    policy: &SafetyPolicy,
    step: u64,
) -> Result<(), Stop> {
    match classify(heap, handle, offset, policy)? {
        Access::InBounds => heap.write(handle, offset, value).map_err(Stop::Trap),
        Access::Tolerated => {
            let key = (handle, offset);
            if !table.entries.contains_key(&key) && table.entries.len() >= policy.cap {
                return Err(Stop::Detect(DetectReason::UnsafeOob));
            }
            table.entries.insert(key, value);
            table.events.push(OobEvent { kind: AccessKind::Write, handle, offset, step });
            Ok(())
        }
    }
}

pub fn mem_read(
    heap: &Heap,
    table: &mut OverflowTable,
    handle: Word,
    offset: Word,
    policy: &SafetyPolicy,
    step: u64,
) -> Result<Word, Stop> {
    match classify(heap, handle, offset, policy)? {
        Access::InBounds => heap.read(handle, offset).map_err(Stop::Trap),
        Access::Tolerated => {
            table.events.push(OobEvent { kind: AccessKind::Read, handle, offset, step });
            Ok(table.entries.get(&(handle, offset)).copied().unwrap_or(0))
        }
    }
}

/// Memory hook that installs overflow tolerance into the interpreter.
#[derive(Debug, Clone, Default)]
pub struct BoundlessMemory {
    policy: SafetyPolicy,
    table: OverflowTable,
}

impl BoundlessMemory {
    pub fn new(policy: SafetyPolicy) -> Result<Self, PolicyError> {
        policy.validate()?;
        Ok(BoundlessMemory { policy, table: OverflowTable::default() })
    }

    pub fn policy(&self) -> &SafetyPolicy {
        &self.policy
    }

    pub fn table(&self) -> &OverflowTable {
        &self.table
    }

    pub fn events(&self) -> &[OobEvent] {
        self.table.events()
    }

    /// Service restart: overflow state does not survive it.
    pub fn restart(&mut self) {
        self.table.clear();
    }

    /// Event log as JSON lines.
    pub fn events_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.table.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }
}

impl MemHook for BoundlessMemory {
    fn load(&mut self, heap: &Heap, handle: Word, offset: Word, step: u64) -> Result<Word, Stop> {
        mem_read(heap, &mut self.table, handle, offset, &self.policy, step)
    }

    fn store(&mut self, heap: &mut Heap, handle: Word, offset: Word, value: Word, step: u64) -> Result<(), Stop> {
        mem_write(heap, &mut self.table, handle, offset, value, &self.policy, step)
    }
}
