//! Encoded processing with dual AN codes.
//!
//! A functional value `x` is carried as the pair `(A1*x, A2*x)` for two
//! distinct odd primes. A valid pair has both residues zero and agreeing
//! quotients; a wrong computation lands outside that set with overwhelming
//! probability, and any single bit flip always does (a flip adds `±2^k`, which
//! is never a multiple of an odd prime).
//!
//! [`transform_delta`] rewrites a program so that every register and memory
//! cell holds codewords, and every externally visible decision (branch,
//! comparison, address, output) first verifies code membership.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::ir::{BinOp, CodeParams, IRProgram, Instruction, Lane, Reg, Word, LOGICAL_REGS};

/// Exclusive bound on functional magnitudes.
pub const FUNCTIONAL_LIMIT: Word = 1 << 31;

pub const DEFAULT_A1: Word = 251;
pub const DEFAULT_A2: Word = 257;

/// Candidate constants for per-build randomization.
pub const DEFAULT_PRIME_POOL: [Word; 16] = [
    251, 257, 263, 269, 271, 277, 281, 283, 293, 307, 311, 313, 317, 331, 337, 347,
];

pub fn in_functional_range(x: Word) -> bool {
    x > -FUNCTIONAL_LIMIT && x < FUNCTIONAL_LIMIT
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CodeViolation {
    #[error("first copy is not a multiple of A1")]
    Residue1,
    #[error("second copy is not a multiple of A2")]
    Residue2,
    #[error("copies decode to different values")]
    CrossMismatch,
}

impl CodeViolation {
    pub fn code(self) -> &'static str {
        match self {
            CodeViolation::Residue1 => "residue1",
            CodeViolation::Residue2 => "residue2",
            CodeViolation::CrossMismatch => "cross-mismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeltaError {
    #[error("value {0} outside the functional range")]
    Range(i128),
    #[error("code violation: {0}")]
    Violation(#[from] CodeViolation),
    #[error("unsupported instruction `{mnemonic}` at index {index}")]
    UnsupportedInstruction { index: usize, mnemonic: String },
    #[error("register r{0} exceeds the encodable register window")]
    Register(usize),
    #[error("invalid encoding parameters: {0}")]
    Params(String),
}

/// Codeword pair for one functional value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncodedPair {
    pub c1: Word,
    pub c2: Word,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodingParams {
    pub code: CodeParams,
    pub prime_pool: Vec<Word>,
}

impl Default for EncodingParams {
    fn default() -> Self {
        EncodingParams {
            code: CodeParams { a1: DEFAULT_A1, a2: DEFAULT_A2 },
            prime_pool: DEFAULT_PRIME_POOL.to_vec(),
        }
    }
}

fn is_odd_prime(n: Word) -> bool {
    if n < 3 || n % 2 == 0 {
        return false;
    }
    let mut d = 3;
    while d * d <= n {
        if n % d == 0 {
            return false;
        }
        d += 2;
    }
    true
}

impl EncodingParams {
    pub fn new(a1: Word, a2: Word) -> Result<Self, DeltaError> {
        let p = EncodingParams { code: CodeParams { a1, a2 }, ..Default::default() };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), DeltaError> {
        let CodeParams { a1, a2 } = self.code;
        if a1 == a2 {
            return Err(DeltaError::Params("A1 and A2 must differ".into()));
        }
        for a in [a1, a2] {
            if !is_odd_prime(a) {
                return Err(DeltaError::Params(format!("{a} is not an odd prime")));
            }
            // largest codeword must fit a signed word
            if a.checked_mul(FUNCTIONAL_LIMIT).is_none() {
                return Err(DeltaError::Params(format!("{a} too large for 64-bit codewords")));
            }
        }
        Ok(())
    }

    /// Draw `(A1, A2)` from the pool, determined entirely by `seed`.
    pub fn draw(&self, seed: u64) -> Result<EncodingParams, DeltaError> {
        let pool: Vec<Word> = self.prime_pool.iter().copied().filter(|&a| is_odd_prime(a)).collect();
        if pool.len() < 2 {
            return Err(DeltaError::Params("prime pool needs two odd primes".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let picked: Vec<Word> = pool.choose_multiple(&mut rng, 2).copied().collect();
        let drawn = EncodingParams {
            code: CodeParams { a1: picked[0], a2: picked[1] },
            prime_pool: self.prime_pool.clone(),
        };
        drawn.validate()?;
        Ok(drawn)
    }
}

pub fn encode(x: Word, code: CodeParams) -> Result<EncodedPair, DeltaError> {
    if !in_functional_range(x) {
        return Err(DeltaError::Range(x.into()));
    }
    Ok(EncodedPair { c1: code.a1 * x, c2: code.a2 * x })
}

/// Membership test of the code; returns the functional value.
pub fn decode_checked(v: EncodedPair, code: CodeParams) -> Result<Word, CodeViolation> {
    if v.c1 % code.a1 != 0 {
        return Err(CodeViolation::Residue1);
    }
    if v.c2 % code.a2 != 0 {
        return Err(CodeViolation::Residue2);
    }
    let x = v.c1 / code.a1;
    if x != v.c2 / code.a2 {
        return Err(CodeViolation::CrossMismatch);
    }
    Ok(x)
}

fn check_magnitude(pair: (i128, i128), code: CodeParams) -> Result<EncodedPair, DeltaError> {
    let lim = i128::from(FUNCTIONAL_LIMIT);
    for (c, a) in [(pair.0, code.a1), (pair.1, code.a2)] {
        if c.abs() >= i128::from(a) * lim {
            return Err(DeltaError::Range(c / i128::from(a)));
        }
    }
    Ok(EncodedPair { c1: pair.0 as Word, c2: pair.1 as Word })
}

pub fn enc_add(a: EncodedPair, b: EncodedPair, code: CodeParams) -> Result<EncodedPair, DeltaError> {
    check_magnitude(
        (i128::from(a.c1) + i128::from(b.c1), i128::from(a.c2) + i128::from(b.c2)),
        code,
    )
}

pub fn enc_sub(a: EncodedPair, b: EncodedPair, code: CodeParams) -> Result<EncodedPair, DeltaError> {
    check_magnitude(
        (i128::from(a.c1) - i128::from(b.c1), i128::from(a.c2) - i128::from(b.c2)),
        code,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneError {
    Remainder,
    Range,
}

/// One copy of an encoded multiply: `(a * b) / A` over a 128-bit product.
pub fn mul_lane(a: Word, b: Word, constant: Word) -> Result<Word, LaneError> {
    let prod = i128::from(a) * i128::from(b);
    let k = i128::from(constant);
    if prod % k != 0 {
        return Err(LaneError::Remainder);
    }
    let q = prod / k;
    if q.abs() >= k * i128::from(FUNCTIONAL_LIMIT) {
        return Err(LaneError::Range);
    }
    Ok(q as Word)
}

pub fn enc_mul(a: EncodedPair, b: EncodedPair, code: CodeParams) -> Result<EncodedPair, DeltaError> {
    let lane = |x, y, k, residue| {
        mul_lane(x, y, k).map_err(|e| match e {
            LaneError::Remainder => DeltaError::Violation(residue),
            LaneError::Range => DeltaError::Range(i128::from(x) * i128::from(y) / i128::from(k) / i128::from(k)),
        })
    };
    Ok(EncodedPair {
        c1: lane(a.c1, b.c1, code.a1, CodeViolation::Residue1)?,
        c2: lane(a.c2, b.c2, code.a2, CodeViolation::Residue2)?,
    })
}

/// Encode `p` with copy two of logical `rK` in `r(K+32)`.
pub fn transform_delta(p: &IRProgram, params: &EncodingParams) -> Result<IRProgram, DeltaError> {
    transform_delta_banked(p, params, LOGICAL_REGS)
}

/// Encode `p` with copy two of logical `rK` in `r(K+bank)`; every register of
/// `p` must be below `bank`.
pub fn transform_delta_banked(
    p: &IRProgram,
    params: &EncodingParams,
    bank: usize,
) -> Result<IRProgram, DeltaError> {
    params.validate()?;
    let code = params.code;
    if let Some(max) = p.max_register() {
        if max >= bank || max + bank >= crate::ir::NUM_REGS {
            return Err(DeltaError::Register(max));
        }
    }
    let two = |r: Reg| r.shifted(bank);

    let mut out: Vec<Instruction> = Vec::with_capacity(p.len() * 3);
    let mut new_index = Vec::with_capacity(p.len());
    for (index, inst) in p.instructions.iter().enumerate() {
        use Instruction::*;
        new_index.push(out.len());
        let unsupported = || DeltaError::UnsupportedInstruction { index, mnemonic: inst.mnemonic() };
        let checks = |out: &mut Vec<Instruction>, regs: &[Reg]| {
            let mut seen: Vec<Reg> = Vec::new();
            for &r in regs {
                if !seen.contains(&r) {
                    seen.push(r);
                    out.push(CodeChk { c1: r, c2: two(r) });
                }
            }
        };
        match *inst {
            Const { dst, imm } => {
                let e = encode(imm, code)?;
                out.push(Const { dst, imm: e.c1 });
                out.push(Const { dst: two(dst), imm: e.c2 });
            }
            Mov { dst, src } => {
                out.push(Mov { dst, src });
                out.push(Mov { dst: two(dst), src: two(src) });
            }
            Bin { op: op @ (BinOp::Add | BinOp::Sub), dst, lhs, rhs } => {
                out.push(Bin { op, dst, lhs, rhs });
                out.push(Bin { op, dst: two(dst), lhs: two(lhs), rhs: two(rhs) });
            }
            Bin { op: BinOp::Mul, dst, lhs, rhs } => {
                out.push(EncMul { lane: Lane::One, dst, lhs, rhs });
                out.push(EncMul { lane: Lane::Two, dst: two(dst), lhs: two(lhs), rhs: two(rhs) });
            }
            Bin { op: op @ (BinOp::Eq | BinOp::Lt), dst, lhs, rhs } => {
                checks(&mut out, &[lhs, rhs]);
                out.push(EncCmp { lane: Lane::One, op, dst, lhs, rhs });
                out.push(EncCmp { lane: Lane::Two, op, dst: two(dst), lhs: two(lhs), rhs: two(rhs) });
            }
            Bin { .. } => return Err(unsupported()),
            Br { cond, target } => {
                checks(&mut out, &[cond]);
                out.push(Br { cond, target });
            }
            Jmp { target } => out.push(Jmp { target }),
            Alloc { dst, size } => {
                checks(&mut out, &[size]);
                out.push(EncAlloc { dst1: dst, dst2: two(dst), size });
            }
            Load { dst, obj, off } => {
                checks(&mut out, &[obj, off]);
                out.push(EncLoad { lane: Lane::One, dst, obj, off });
                out.push(EncLoad { lane: Lane::Two, dst: two(dst), obj: two(obj), off: two(off) });
            }
            Store { obj, off, src } => {
                checks(&mut out, &[obj, off, src]);
                out.push(EncStore { lane: Lane::One, obj, off, src });
                out.push(EncStore { lane: Lane::Two, obj: two(obj), off: two(off), src: two(src) });
            }
            In { dst, idx } => {
                out.push(In { dst, idx });
                out.push(Enc { lane: Lane::Two, dst: two(dst), src: dst });
                out.push(Enc { lane: Lane::One, dst, src: dst });
            }
            Out { src } => {
                checks(&mut out, &[src]);
                out.push(DecOut { src });
            }
            Halt => out.push(Halt),
            _ => return Err(unsupported()),
        }
    }
    for inst in out.iter_mut() {
        if let Some(t) = inst.target() {
            *inst = inst.with_target(new_index[t]);
        }
    }
    Ok(IRProgram { instructions: out, code: Some(code), ..Default::default() })
}
