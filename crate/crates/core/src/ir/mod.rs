//! Register-based IR shared by the interpreter, the hardening transforms and
//! the fault injector.
//!
//! Programs are flat instruction sequences over 64 signed 64-bit registers and
//! an object/offset addressed heap. Branch targets are instruction indices;
//! labels only exist in source text and are erased by canonical serialization.
//!
//! Besides the base instruction set, the IR carries two families of
//! pseudo-instructions emitted by the hardening passes: transaction markers
//! and register checks for lock-step execution, and lane-tagged encoded
//! operations for AN-coded execution.

mod interp;
mod parse;

use std::collections::BTreeMap;
use std::fmt;

pub use interp::{
    execute, CostHook, DetectReason, ExecResult, Heap, Hooks, Limits, Machine, MachineState,
    MemHook, Object, ServiceGate, Status, Stop, Trap,
};
pub use parse::{parse_program, SyntaxError};

/// Machine word: two's-complement, all arithmetic wraps.
pub type Word = i64;

/// Number of physical registers.
pub const NUM_REGS: usize = 64;

/// Registers a source program may use before hardening splits the file into banks.
pub const LOGICAL_REGS: usize = 32;

/// Physical register index, always `< 64`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reg(u8);

impl Reg {
    pub fn new(index: usize) -> Option<Reg> {
        (index < NUM_REGS).then_some(Reg(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Same register shifted into another bank. Panics past r63.
    pub fn shifted(self, by: usize) -> Reg {
        Reg::new(self.index() + by).expect("register shifted out of range")
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Two-source ALU operations, including the comparisons that write 1/0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Divs,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Eq,
    Lt,
}

impl BinOp {
    pub const ALL: [BinOp; 11] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::Divs,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Shl,
        BinOp::Shr,
        BinOp::Eq,
        BinOp::Lt,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Divs => "divs",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::Shr => "shr",
            BinOp::Eq => "eq",
            BinOp::Lt => "lt",
        }
    }

    /// `None` means the operation traps (division by zero).
    pub fn apply(self, a: Word, b: Word) -> Option<Word> {
        Some(match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::Divs => {
                if b == 0 {
                    return None;
                }
                a.wrapping_div(b)
            }
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => a.wrapping_shl((b & 63) as u32),
            BinOp::Shr => a.wrapping_shr((b & 63) as u32),
            BinOp::Eq => (a == b) as Word,
            BinOp::Lt => (a < b) as Word,
        })
    }

    pub fn is_compare(self) -> bool {
        matches!(self, BinOp::Eq | BinOp::Lt)
    }
}

/// Codeword lane of an encoded operation: lane one uses `A1` and even memory
/// cells, lane two uses `A2` and odd cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Lane {
    One,
    Two,
}

impl Lane {
    pub fn suffix(self) -> &'static str {
        match self {
            Lane::One => "1",
            Lane::Two => "2",
        }
    }

    pub fn cell_offset(self) -> Word {
        match self {
            Lane::One => 0,
            Lane::Two => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Instruction {
    Const { dst: Reg, imm: Word },
    Mov { dst: Reg, src: Reg },
    Bin { op: BinOp, dst: Reg, lhs: Reg, rhs: Reg },
    Br { cond: Reg, target: usize },
    Jmp { target: usize },
    Alloc { dst: Reg, size: Reg },
    Load { dst: Reg, obj: Reg, off: Reg },
    Store { obj: Reg, off: Reg, src: Reg },
    In { dst: Reg, idx: Word },
    Out { src: Reg },
    Halt,

    /// Open a rollback region (commits any region already open).
    TxBegin,
    /// Commit the open region, if any.
    TxEnd,
    /// Lock-step comparison of a master and a shadow register.
    Chk { a: Reg, b: Reg },

    /// `dst = A(lane) * src`, fail-stop when `src` is outside the functional range.
    Enc { lane: Lane, dst: Reg, src: Reg },
    /// `dst = (lhs * rhs) / A(lane)` with a 128-bit product and exact division.
    EncMul { lane: Lane, dst: Reg, lhs: Reg, rhs: Reg },
    /// Decoded comparison, re-encoded into `lane`. `op` is `Eq` or `Lt`.
    EncCmp { lane: Lane, op: BinOp, dst: Reg, lhs: Reg, rhs: Reg },
    /// Codeword membership test of the pair `(c1, c2)`.
    CodeChk { c1: Reg, c2: Reg },
    /// Emit the functional value of a lane-one codeword.
    DecOut { src: Reg },
    /// Allocate `2 * size` cells and write the encoded handle into both lanes.
    EncAlloc { dst1: Reg, dst2: Reg, size: Reg },
    EncLoad { lane: Lane, dst: Reg, obj: Reg, off: Reg },
    EncStore { lane: Lane, obj: Reg, off: Reg, src: Reg },
}

impl Instruction {
    pub fn mnemonic(&self) -> String {
        use Instruction::*;
        match self {
            Const { .. } => "const".into(),
            Mov { .. } => "mov".into(),
            Bin { op, .. } => op.mnemonic().into(),
            Br { .. } => "br".into(),
            Jmp { .. } => "jmp".into(),
            Alloc { .. } => "alloc".into(),
            Load { .. } => "load".into(),
            Store { .. } => "store".into(),
            In { .. } => "in".into(),
            Out { .. } => "out".into(),
            Halt => "halt".into(),
            TxBegin => "txbegin".into(),
            TxEnd => "txend".into(),
            Chk { .. } => "chk".into(),
            Enc { lane, .. } => format!("enc.{}", lane.suffix()),
            EncMul { lane, .. } => format!("emul.{}", lane.suffix()),
            EncCmp { lane, op, .. } => format!("d{}.{}", op.mnemonic(), lane.suffix()),
            CodeChk { .. } => "dchk".into(),
            DecOut { .. } => "dout".into(),
            EncAlloc { .. } => "dalloc".into(),
            EncLoad { lane, .. } => format!("eload.{}", lane.suffix()),
            EncStore { lane, .. } => format!("estore.{}", lane.suffix()),
        }
    }

    /// Every register the instruction reads or writes.
    pub fn registers(&self) -> Vec<Reg> {
        use Instruction::*;
        match *self {
            Const { dst, .. } | In { dst, .. } => vec![dst],
            Mov { dst, src } => vec![dst, src],
            Bin { dst, lhs, rhs, .. } => vec![dst, lhs, rhs],
            Br { cond, .. } => vec![cond],
            Jmp { .. } | Halt | TxBegin | TxEnd => vec![],
            Alloc { dst, size } => vec![dst, size],
            Load { dst, obj, off } => vec![dst, obj, off],
            Store { obj, off, src } => vec![obj, off, src],
            Out { src } | DecOut { src } => vec![src],
            Chk { a, b } => vec![a, b],
            Enc { dst, src, .. } => vec![dst, src],
            EncMul { dst, lhs, rhs, .. } | EncCmp { dst, lhs, rhs, .. } => vec![dst, lhs, rhs],
            CodeChk { c1, c2 } => vec![c1, c2],
            EncAlloc { dst1, dst2, size } => vec![dst1, dst2, size],
            EncLoad { dst, obj, off, .. } => vec![dst, obj, off],
            EncStore { obj, off, src, .. } => vec![obj, off, src],
        }
    }

    /// Rename every register through `f`.
    pub fn map_regs(&self, f: impl Fn(Reg) -> Reg) -> Instruction {
        use Instruction::*;
        match *self {
            Const { dst, imm } => Const { dst: f(dst), imm },
            Mov { dst, src } => Mov { dst: f(dst), src: f(src) },
            Bin { op, dst, lhs, rhs } => Bin { op, dst: f(dst), lhs: f(lhs), rhs: f(rhs) },
            Br { cond, target } => Br { cond: f(cond), target },
            Jmp { target } => Jmp { target },
            Alloc { dst, size } => Alloc { dst: f(dst), size: f(size) },
            Load { dst, obj, off } => Load { dst: f(dst), obj: f(obj), off: f(off) },
            Store { obj, off, src } => Store { obj: f(obj), off: f(off), src: f(src) },
            In { dst, idx } => In { dst: f(dst), idx },
            Out { src } => Out { src: f(src) },
            Halt => Halt,
            TxBegin => TxBegin,
            TxEnd => TxEnd,
            Chk { a, b } => Chk { a: f(a), b: f(b) },
            Enc { lane, dst, src } => Enc { lane, dst: f(dst), src: f(src) },
            EncMul { lane, dst, lhs, rhs } => EncMul { lane, dst: f(dst), lhs: f(lhs), rhs: f(rhs) },
            EncCmp { lane, op, dst, lhs, rhs } => EncCmp { lane, op, dst: f(dst), lhs: f(lhs), rhs: f(rhs) },
            CodeChk { c1, c2 } => CodeChk { c1: f(c1), c2: f(c2) },
            DecOut { src } => DecOut { src: f(src) },
            EncAlloc { dst1, dst2, size } => EncAlloc { dst1: f(dst1), dst2: f(dst2), size: f(size) },
            EncLoad { lane, dst, obj, off } => EncLoad { lane, dst: f(dst), obj: f(obj), off: f(off) },
            EncStore { lane, obj, off, src } => EncStore { lane, obj: f(obj), off: f(off), src: f(src) },
        }
    }

    pub fn target(&self) -> Option<usize> {
        match *self {
            Instruction::Br { target, .. } | Instruction::Jmp { target } => Some(target),
            _ => None,
        }
    }

    pub fn with_target(&self, new_target: usize) -> Instruction {
        match *self {
            Instruction::Br { cond, .. } => Instruction::Br { cond, target: new_target },
            Instruction::Jmp { .. } => Instruction::Jmp { target: new_target },
            other => other,
        }
    }

    /// True for instructions that end a basic block.
    pub fn is_terminator(&self) -> bool {
        matches!(self, Instruction::Br { .. } | Instruction::Jmp { .. } | Instruction::Halt)
    }

    pub fn is_lockstep_pseudo(&self) -> bool {
        matches!(self, Instruction::TxBegin | Instruction::TxEnd | Instruction::Chk { .. })
    }

    pub fn is_encoded(&self) -> bool {
        use Instruction::*;
        matches!(
            self,
            Enc { .. }
                | EncMul { .. }
                | EncCmp { .. }
                | CodeChk { .. }
                | DecOut { .. }
                | EncAlloc { .. }
                | EncLoad { .. }
                | EncStore { .. }
        )
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Instruction::*;
        let m = self.mnemonic();
        match *self {
            Const { dst, imm } => write!(f, "{m} {dst}, {imm}"),
            Mov { dst, src } => write!(f, "{m} {dst}, {src}"),
            Bin { dst, lhs, rhs, .. } => write!(f, "{m} {dst}, {lhs}, {rhs}"),
            Br { cond, target } => write!(f, "{m} {cond}, {target}"),
            Jmp { target } => write!(f, "{m} {target}"),
            Alloc { dst, size } => write!(f, "{m} {dst}, {size}"),
            Load { dst, obj, off } => write!(f, "{m} {dst}, {obj}, {off}"),
            Store { obj, off, src } => write!(f, "{m} {obj}, {off}, {src}"),
            In { dst, idx } => write!(f, "{m} {dst}, {idx}"),
            Out { src } | DecOut { src } => write!(f, "{m} {src}"),
            Halt | TxBegin | TxEnd => write!(f, "{m}"),
            Chk { a, b } => write!(f, "{m} {a}, {b}"),
            Enc { dst, src, .. } => write!(f, "{m} {dst}, {src}"),
            EncMul { dst, lhs, rhs, .. } | EncCmp { dst, lhs, rhs, .. } => {
                write!(f, "{m} {dst}, {lhs}, {rhs}")
            }
            CodeChk { c1, c2 } => write!(f, "{m} {c1}, {c2}"),
            EncAlloc { dst1, dst2, size } => write!(f, "{m} {dst1}, {dst2}, {size}"),
            EncLoad { dst, obj, off, .. } => write!(f, "{m} {dst}, {obj}, {off}"),
            EncStore { obj, off, src, .. } => write!(f, "{m} {obj}, {off}, {src}"),
        }
    }
}

/// AN-code constants recorded in an encoded program's header.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CodeParams {
    pub a1: Word,
    pub a2: Word,
}

impl CodeParams {
    pub fn constant(&self, lane: Lane) -> Word {
        match lane {
            Lane::One => self.a1,
            Lane::Two => self.a2,
        }
    }
}

/// Parsed, resolved program.
///
/// Equality is structural: labels are source metadata and take no part in it.
#[derive(Clone, Debug, Default)]
pub struct IRProgram {
    pub instructions: Vec<Instruction>,
    pub labels: BTreeMap<String, usize>,
    pub entry: usize,
    /// Present on encoded programs.
    pub code: Option<CodeParams>,
    /// Retry budget recorded on lock-step programs.
    pub max_retries: Option<u32>,
}

impl PartialEq for IRProgram {
    fn eq(&self, other: &Self) -> bool {
        self.instructions == other.instructions
            && self.entry == other.entry
            && self.code == other.code
            && self.max_retries == other.max_retries
    }
}

impl Eq for IRProgram {}

impl IRProgram {
    pub fn new(instructions: Vec<Instruction>) -> IRProgram {
        IRProgram { instructions, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// Highest register index referenced, if any.
    pub fn max_register(&self) -> Option<usize> {
        self.instructions
            .iter()
            .flat_map(|i| i.registers())
            .map(Reg::index)
            .max()
    }

    /// Sorted, deduplicated set of referenced registers.
    pub fn registers_used(&self) -> Vec<Reg> {
        let mut regs: Vec<Reg> = self.instructions.iter().flat_map(|i| i.registers()).collect();
        regs.sort();
        regs.dedup();
        regs
    }

    /// Indices of the first instruction of every basic block, ascending.
    pub fn block_leaders(&self) -> Vec<usize> {
        let n = self.instructions.len();
        let mut leader = vec![false; n];
        if n > 0 {
            leader[0] = true;
        }
        for (i, inst) in self.instructions.iter().enumerate() {
            if let Some(t) = inst.target() {
                leader[t] = true;
            }
            if inst.is_terminator() && i + 1 < n {
                leader[i + 1] = true;
            }
        }
        (0..n).filter(|&i| leader[i]).collect()
    }
}

/// Canonical byte form: optional `#!` header lines, then one instruction per
/// line with numeric branch targets.
pub fn serialize_canonical(p: &IRProgram) -> Vec<u8> {
    let mut out = String::new();
    if let Some(code) = p.code {
        out.push_str(&format!("#! delta A1={} A2={}\n", code.a1, code.a2));
    }
    if let Some(r) = p.max_retries {
        out.push_str(&format!("#! haft max_retries={r}\n"));
    }
    for inst in &p.instructions {
        out.push_str(&inst.to_string());
        out.push('\n');
    }
    out.into_bytes()
}
