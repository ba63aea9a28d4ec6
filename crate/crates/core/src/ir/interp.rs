//! Cycle-accounting interpreter.
//!
//! Every executed instruction costs one cycle; an installed [`CostHook`] may
//! add a surcharge per heap access. Lock-step pseudo-instructions get
//! transactional semantics: a failed check or a trap inside an open region
//! rolls the machine back to the region start and re-executes it, up to the
//! retry budget.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Serialize, Serializer};

use super::{BinOp, IRProgram, Instruction, Lane, Reg, Word, NUM_REGS};
use crate::delta::{self, CodeViolation, EncodedPair};

/// Hardware-style trap. Ends the run as `Crashed` unless a region absorbs it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Trap {
    DivByZero,
    InvalidHandle,
    OutOfBounds,
    BadAlloc,
}

impl Trap {
    pub fn code(self) -> &'static str {
        match self {
            Trap::DivByZero => "div-by-zero",
            Trap::InvalidHandle => "invalid-handle",
            Trap::OutOfBounds => "out-of-bounds",
            Trap::BadAlloc => "bad-alloc",
        }
    }
}

/// Reason attached to a fail-stop `Detected` status.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DetectReason {
    CheckDivergence,
    CodeResidue1,
    CodeResidue2,
    CodeCrossMismatch,
    CodeRange,
    DeniedSyscall,
    UnsafeOob,
}

impl DetectReason {
    pub fn code(self) -> &'static str {
        match self {
            DetectReason::CheckDivergence => "check-divergence",
            DetectReason::CodeResidue1 => "code-residue1",
            DetectReason::CodeResidue2 => "code-residue2",
            DetectReason::CodeCrossMismatch => "code-cross-mismatch",
            DetectReason::CodeRange => "code-range",
            DetectReason::DeniedSyscall => "denied-syscall",
            DetectReason::UnsafeOob => "unsafe-oob",
        }
    }

    /// Transient-fault detections that a rollback region may retry.
    fn retryable(self) -> bool {
        !matches!(self, DetectReason::DeniedSyscall | DetectReason::UnsafeOob)
    }
}

impl From<CodeViolation> for DetectReason {
    fn from(v: CodeViolation) -> Self {
        match v {
            CodeViolation::Residue1 => DetectReason::CodeResidue1,
            CodeViolation::Residue2 => DetectReason::CodeResidue2,
            CodeViolation::CrossMismatch => DetectReason::CodeCrossMismatch,
        }
    }
}

/// Why an instruction could not complete.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stop {
    Trap(Trap),
    Detect(DetectReason),
}

impl From<Trap> for Stop {
    fn from(t: Trap) -> Self {
        Stop::Trap(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Status {
    Halted,
    Detected(DetectReason),
    Crashed(Trap),
    HangLimit,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Status::Halted => f.write_str("halted"),
            Status::Detected(r) => write!(f, "detected:{}", r.code()),
            Status::Crashed(t) => write!(f, "crashed:{}", t.code()),
            Status::HangLimit => f.write_str("hang-limit"),
        }
    }
}

impl Serialize for Status {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExecResult {
    pub status: Status,
    pub output: Vec<Word>,
    pub dyn_insts: u64,
    pub cycles: u64,
    /// Region rollbacks performed during the run.
    pub rollbacks: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    pub max_steps: u64,
}

impl Limits {
    pub fn new(max_steps: u64) -> Limits {
        assert!(max_steps > 0, "max_steps must be positive");
        Limits { max_steps }
    }
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_steps: 10_000_000 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Object {
    pub size: Word,
    /// Written cells only; unwritten in-bounds cells read as zero.
    pub cells: BTreeMap<Word, Word>,
}

/// Object/offset addressed heap. Handles start at 1 and are never reused by
/// committed execution; a rollback rewinds the handle counter with the heap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Heap {
    objects: BTreeMap<Word, Object>,
    next_handle: Word,
}

impl Default for Heap {
    fn default() -> Self {
        Heap { objects: BTreeMap::new(), next_handle: 1 }
    }
}

impl Heap {
    pub fn alloc(&mut self, size: Word) -> Word {
        let h = self.next_handle;
        self.next_handle += 1;
        self.objects.insert(h, Object { size, cells: BTreeMap::new() });
        h
    }

    pub fn object(&self, handle: Word) -> Option<&Object> {
        self.objects.get(&handle)
    }

    pub fn objects(&self) -> impl Iterator<Item = (Word, &Object)> {
        self.objects.iter().map(|(h, o)| (*h, o))
    }

    pub fn read(&self, handle: Word, offset: Word) -> Result<Word, Trap> {
        let obj = self.objects.get(&handle).ok_or(Trap::InvalidHandle)?;
        if offset < 0 || offset >= obj.size {
            return Err(Trap::OutOfBounds);
        }
        Ok(obj.cells.get(&offset).copied().unwrap_or(0))
    }

    pub fn write(&mut self, handle: Word, offset: Word, value: Word) -> Result<(), Trap> {
        let obj = self.objects.get_mut(&handle).ok_or(Trap::InvalidHandle)?;
        if offset < 0 || offset >= obj.size {
            return Err(Trap::OutOfBounds);
        }
        obj.cells.insert(offset, value);
        Ok(())
    }

    /// Raw cell content for in-bounds addresses: `Some(None)` is an unwritten cell.
    fn peek(&self, handle: Word, offset: Word) -> Option<Option<Word>> {
        let obj = self.objects.get(&handle)?;
        (offset >= 0 && offset < obj.size).then(|| obj.cells.get(&offset).copied())
    }

    fn restore(&mut self, handle: Word, offset: Word, old: Option<Word>) {
        if let Some(obj) = self.objects.get_mut(&handle) {
            match old {
                Some(v) => obj.cells.insert(offset, v),
                None => obj.cells.remove(&offset),
            };
        }
    }

    /// Drop every object allocated since `next_handle` was current.
    fn rewind(&mut self, next_handle: Word) {
        self.objects.retain(|&h, _| h < next_handle);
        self.next_handle = next_handle;
    }

    pub fn written_cells(&self) -> usize {
        self.objects.values().map(|o| o.cells.len()).sum()
    }

    /// The `k`-th written cell in (handle, offset) order.
    pub fn nth_written_cell(&self, k: usize) -> Option<(Word, Word)> {
        self.objects
            .iter()
            .flat_map(|(h, o)| o.cells.keys().map(move |off| (*h, *off)))
            .nth(k)
    }

    /// XOR `mask` into a cell. Returns false if the address is not in bounds.
    pub fn flip(&mut self, handle: Word, offset: Word, mask: Word) -> bool {
        match self.objects.get_mut(&handle) {
            Some(obj) if offset >= 0 && offset < obj.size => {
                *obj.cells.entry(offset).or_insert(0) ^= mask;
                true
            }
            _ => false,
        }
    }
}

/// Intercepts every heap load and store (overflow-tolerant memory).
pub trait MemHook {
    fn load(&mut self, heap: &Heap, handle: Word, offset: Word, step: u64) -> Result<Word, Stop>;
    fn store(
        &mut self,
        heap: &mut Heap,
        handle: Word,
        offset: Word,
        value: Word,
        step: u64,
    ) -> Result<(), Stop>;
}

/// Adds cycles on heap traffic (enclave paging model).
pub trait CostHook {
    fn on_alloc(&mut self, _handle: Word, _size: Word) -> u64 {
        0
    }
    fn on_access(&mut self, handle: Word, offset: Word) -> u64;
}

/// Decides whether a service call (`out`, file and channel calls) may proceed.
pub trait ServiceGate {
    fn permit(&self, call: &str) -> bool;
}

#[derive(Default)]
pub struct Hooks<'a> {
    pub mem: Option<&'a mut dyn MemHook>,
    pub cost: Option<&'a mut dyn CostHook>,
    pub gate: Option<&'a dyn ServiceGate>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MachineState {
    pub regs: [Word; NUM_REGS],
    pub heap: Heap,
    pub input: Vec<Word>,
    pub output: Vec<Word>,
    pub pc: usize,
    pub cycles: u64,
    pub dyn_insts: u64,
}

/// Checkpoint taken at `txbegin`.
#[derive(Clone, Debug)]
struct TxCheckpoint {
    regs: [Word; NUM_REGS],
    resume_pc: usize,
    output_len: usize,
    writelog: Vec<(Word, Word, Option<Word>)>,
    next_handle: Word,
    retries: u32,
}

enum Flow {
    Next,
    Jump(usize),
    Halt,
}

pub const DEFAULT_MAX_RETRIES: u32 = 3;

/// A running program. Borrowing the program immutably keeps transforms and
/// callers free of interpreter side effects.
pub struct Machine<'p> {
    program: &'p IRProgram,
    state: MachineState,
    limits: Limits,
    max_retries: u32,
    tx: Option<TxCheckpoint>,
    rollbacks: u64,
    patch: Option<(usize, Instruction)>,
    done: Option<Status>,
}

impl<'p> Machine<'p> {
    pub fn new(program: &'p IRProgram, input: &[Word], limits: Limits) -> Machine<'p> {
        Machine {
            program,
            state: MachineState {
                regs: [0; NUM_REGS],
                heap: Heap::default(),
                input: input.to_vec(),
                output: Vec::new(),
                pc: program.entry,
                cycles: 0,
                dyn_insts: 0,
            },
            limits,
            max_retries: program.max_retries.unwrap_or(DEFAULT_MAX_RETRIES),
            tx: None,
            rollbacks: 0,
            patch: None,
            done: None,
        }
    }

    pub fn with_max_retries(mut self, retries: u32) -> Self {
        self.max_retries = retries.max(1);
        self
    }

    pub fn state(&self) -> &MachineState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut MachineState {
        &mut self.state
    }

    pub fn program(&self) -> &IRProgram {
        self.program
    }

    pub fn in_region(&self) -> bool {
        self.tx.is_some()
    }

    pub fn rollbacks(&self) -> u64 {
        self.rollbacks
    }

    pub fn status(&self) -> Option<Status> {
        self.done
    }

    /// Execute `inst` in place of the instruction at `index` until cleared.
    pub fn set_patch(&mut self, index: usize, inst: Instruction) {
        self.patch = Some((index, inst));
    }

    pub fn clear_patch(&mut self) {
        self.patch = None;
    }

    /// Instruction the next step will execute, honoring any patch.
    pub fn next_instruction(&self) -> Option<(usize, Instruction)> {
        let pc = self.state.pc;
        let inst = match self.patch {
            Some((i, p)) if i == pc => p,
            _ => *self.program.instructions.get(pc)?,
        };
        Some((pc, inst))
    }

    /// Run one instruction. Returns the final status once the run has ended.
    pub fn step(&mut self, hooks: &mut Hooks<'_>) -> Option<Status> {
        if self.done.is_none() {
            self.done = self.step_inner(hooks);
        }
        self.done
    }

    pub fn run(&mut self, hooks: &mut Hooks<'_>) -> ExecResult {
        while self.step(hooks).is_none() {}
        self.result()
    }

    pub fn result(&self) -> ExecResult {
        ExecResult {
            status: self.done.unwrap_or(Status::HangLimit),
            output: self.state.output.clone(),
            dyn_insts: self.state.dyn_insts,
            cycles: self.state.cycles,
            rollbacks: self.rollbacks,
        }
    }

    fn step_inner(&mut self, hooks: &mut Hooks<'_>) -> Option<Status> {
        let Some((pc, inst)) = self.next_instruction() else {
            self.tx = None;
            return Some(Status::Halted);
        };
        if self.state.dyn_insts >= self.limits.max_steps {
            return Some(Status::HangLimit);
        }
        self.state.dyn_insts += 1;
        self.state.cycles += 1;
        match self.exec(pc, inst, hooks) {
            Ok(Flow::Next) => {
                self.state.pc = pc + 1;
                None
            }
            Ok(Flow::Jump(t)) => {
                self.state.pc = t;
                None
            }
            Ok(Flow::Halt) => Some(Status::Halted),
            Err(stop) => self.on_stop(stop),
        }
    }

    fn on_stop(&mut self, stop: Stop) -> Option<Status> {
        let retryable = match stop {
            Stop::Trap(_) => true,
            Stop::Detect(r) => r.retryable(),
        };
        if retryable {
            if let Some(tx) = self.tx.as_mut() {
                if tx.retries < self.max_retries {
                    tx.retries += 1;
                    self.rollback();
                    return None;
                }
            }
        }
        self.tx = None;
        Some(match stop {
            Stop::Trap(t) => Status::Crashed(t),
            Stop::Detect(r) => Status::Detected(r),
        })
    }

    fn rollback(&mut self) {
        let tx = self.tx.as_mut().expect("rollback outside region");
        self.state.regs = tx.regs;
        for (h, off, old) in tx.writelog.drain(..).rev() {
            self.state.heap.restore(h, off, old);
        }
        self.state.heap.rewind(tx.next_handle);
        self.state.output.truncate(tx.output_len);
        self.state.pc = tx.resume_pc;
        self.rollbacks += 1;
    }

    fn reg(&self, r: Reg) -> Word {
        self.state.regs[r.index()]
    }

    fn set(&mut self, r: Reg, v: Word) {
        self.state.regs[r.index()] = v;
    }

    fn code_constant(&self, lane: Lane) -> Word {
        self.program
            .code
            .expect("encoded instruction without code parameters")
            .constant(lane)
    }

    fn decode(&self, r: Reg, lane: Lane) -> Word {
        self.reg(r) / self.code_constant(lane)
    }

    fn gate(&self, hooks: &Hooks<'_>, call: &str) -> Result<(), Stop> {
        match hooks.gate {
            Some(g) if !g.permit(call) => Err(Stop::Detect(DetectReason::DeniedSyscall)),
            _ => Ok(()),
        }
    }

    fn alloc(&mut self, size: Word, hooks: &mut Hooks<'_>) -> Result<Word, Stop> {
        if size < 0 {
            return Err(Trap::BadAlloc.into());
        }
        let h = self.state.heap.alloc(size);
        if let Some(cost) = hooks.cost.as_deref_mut() {
            self.state.cycles += cost.on_alloc(h, size);
        }
        Ok(h)
    }

    fn load(&mut self, h: Word, off: Word, hooks: &mut Hooks<'_>) -> Result<Word, Stop> {
        let step = self.state.dyn_insts;
        let v = match hooks.mem.as_deref_mut() {
            Some(mem) => mem.load(&self.state.heap, h, off, step)?,
            None => self.state.heap.read(h, off)?,
        };
        if let Some(cost) = hooks.cost.as_deref_mut() {
            self.state.cycles += cost.on_access(h, off);
        }
        Ok(v)
    }

    fn store(&mut self, h: Word, off: Word, v: Word, hooks: &mut Hooks<'_>) -> Result<(), Stop> {
        let step = self.state.dyn_insts;
        let old = self.state.heap.peek(h, off);
        match hooks.mem.as_deref_mut() {
            Some(mem) => mem.store(&mut self.state.heap, h, off, v, step)?,
            None => self.state.heap.write(h, off, v)?,
        }
        if let (Some(tx), Some(old)) = (self.tx.as_mut(), old) {
            tx.writelog.push((h, off, old));
        }
        if let Some(cost) = hooks.cost.as_deref_mut() {
            self.state.cycles += cost.on_access(h, off);
        }
        Ok(())
    }

    fn exec(&mut self, pc: usize, inst: Instruction, hooks: &mut Hooks<'_>) -> Result<Flow, Stop> {
        use Instruction::*;
        match inst {
            Const { dst, imm } => self.set(dst, imm),
            Mov { dst, src } => self.set(dst, self.reg(src)),
            Bin { op, dst, lhs, rhs } => {
                let v = op
                    .apply(self.reg(lhs), self.reg(rhs))
                    .ok_or(Trap::DivByZero)?;
                self.set(dst, v);
            }
            Br { cond, target } => {
                if self.reg(cond) != 0 {
                    return Ok(Flow::Jump(target));
                }
            }
            Jmp { target } => return Ok(Flow::Jump(target)),
            Alloc { dst, size } => {
                let h = self.alloc(self.reg(size), hooks)?;
                self.set(dst, h);
            }
            Load { dst, obj, off } => {
                let v = self.load(self.reg(obj), self.reg(off), hooks)?;
                self.set(dst, v);
            }
            Store { obj, off, src } => {
                self.store(self.reg(obj), self.reg(off), self.reg(src), hooks)?;
            }
            In { dst, idx } => {
                let v = usize::try_from(idx)
                    .ok()
                    .and_then(|i| self.state.input.get(i).copied())
                    .unwrap_or_else(|| {
                        log::warn!("input index {idx} out of range, reading 0");
                        0
                    });
                self.set(dst, v);
            }
            Out { src } => {
                self.gate(hooks, "out")?;
                let v = self.reg(src);
                self.state.output.push(v);
            }
            Halt => {
                self.tx = None;
                return Ok(Flow::Halt);
            }
            TxBegin => {
                self.tx = Some(TxCheckpoint {
                    regs: self.state.regs,
                    resume_pc: pc + 1,
                    output_len: self.state.output.len(),
                    writelog: Vec::new(),
                    next_handle: self.state.heap.next_handle,
                    retries: 0,
                });
            }
            TxEnd => self.tx = None,
            Chk { a, b } => {
                if self.reg(a) != self.reg(b) {
                    return Err(Stop::Detect(DetectReason::CheckDivergence));
                }
            }
            Enc { lane, dst, src } => {
                let x = self.reg(src);
                if !delta::in_functional_range(x) {
                    return Err(Stop::Detect(DetectReason::CodeRange));
                }
                self.set(dst, x.wrapping_mul(self.code_constant(lane)));
            }
            EncMul { lane, dst, lhs, rhs } => {
                let a = self.code_constant(lane);
                let v = delta::mul_lane(self.reg(lhs), self.reg(rhs), a).map_err(|e| {
                    Stop::Detect(match e {
                        delta::LaneError::Remainder if lane == Lane::One => DetectReason::CodeResidue1,
                        delta::LaneError::Remainder => DetectReason::CodeResidue2,
                        delta::LaneError::Range => DetectReason::CodeRange,
                    })
                })?;
                self.set(dst, v);
            }
            EncCmp { lane, op, dst, lhs, rhs } => {
                let a = self.code_constant(lane);
                let x = self.decode(lhs, lane);
                let y = self.decode(rhs, lane);
                let r = if op == BinOp::Eq { x == y } else { x < y };
                self.set(dst, (r as Word) * a);
            }
            CodeChk { c1, c2 } => {
                let code = self.program.code.expect("dchk without code parameters");
                let pair = EncodedPair { c1: self.reg(c1), c2: self.reg(c2) };
                delta::decode_checked(pair, code).map_err(|v| Stop::Detect(v.into()))?;
            }
            DecOut { src } => {
                self.gate(hooks, "out")?;
                let v = self.decode(src, Lane::One);
                self.state.output.push(v);
            }
            EncAlloc { dst1, dst2, size } => {
                let n = self.decode(size, Lane::One);
                let h = self.alloc(n.checked_mul(2).ok_or(Trap::BadAlloc)?, hooks)?;
                self.set(dst1, h.wrapping_mul(self.code_constant(Lane::One)));
                self.set(dst2, h.wrapping_mul(self.code_constant(Lane::Two)));
            }
            EncLoad { lane, dst, obj, off } => {
                let h = self.decode(obj, lane);
                let o = self.decode(off, lane).wrapping_mul(2).wrapping_add(lane.cell_offset());
                let v = self.load(h, o, hooks)?;
                self.set(dst, v);
            }
            EncStore { lane, obj, off, src } => {
                let h = self.decode(obj, lane);
                let o = self.decode(off, lane).wrapping_mul(2).wrapping_add(lane.cell_offset());
                self.store(h, o, self.reg(src), hooks)?;
            }
        }
        Ok(Flow::Next)
    }
}

/// Run `p` to completion. Never panics on program behavior; every anomaly is
/// reported through [`ExecResult::status`].
pub fn execute(p: &IRProgram, input: &[Word], limits: Limits, hooks: &mut Hooks<'_>) -> ExecResult {
    Machine::new(p, input, limits).run(hooks)
}
