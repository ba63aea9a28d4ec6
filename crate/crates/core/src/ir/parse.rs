use std::collections::BTreeMap;

use thiserror::Error;

use super::{BinOp, CodeParams, IRProgram, Instruction, Lane, Reg, Word};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {reason}")]
pub struct SyntaxError {
    pub line: usize,
    pub reason: String,
}

fn err(line: usize, reason: impl Into<String>) -> SyntaxError {
    SyntaxError { line, reason: reason.into() }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

enum Line<'a> {
    Label(&'a str),
    Inst { mnemonic: &'a str, operands: Vec<&'a str> },
    Header(&'a str),
}

fn classify(raw: &str) -> Option<Line<'_>> {
    let trimmed = raw.trim();
    if let Some(rest) = trimmed.strip_prefix("#!") {
        return Some(Line::Header(rest.trim()));
    }
    let code = match trimmed.find('#') {
        Some(i) => trimmed[..i].trim(),
        None => trimmed,
    };
    if code.is_empty() {
        return None;
    }
    if let Some(name) = code.strip_suffix(':') {
        return Some(Line::Label(name.trim()));
    }
    let (mnemonic, rest) = match code.find(char::is_whitespace) {
        Some(i) => (&code[..i], code[i..].trim()),
        None => (code, ""),
    };
    let operands = if rest.is_empty() {
        Vec::new()
    } else {
        rest.split(',').map(str::trim).collect()
    };
    Some(Line::Inst { mnemonic, operands })
}

fn parse_header(text: &str, line: usize, prog: &mut IRProgram) -> Result<(), SyntaxError> {
    let mut words = text.split_whitespace();
    let kind = words.next().unwrap_or("");
    let mut fields = BTreeMap::new();
    for w in words {
        let (k, v) = w
            .split_once('=')
            .ok_or_else(|| err(line, format!("malformed header field `{w}`")))?;
        let v: Word = v
            .parse()
            .map_err(|_| err(line, format!("header value `{v}` is not an integer")))?;
        fields.insert(k, v);
    }
    match kind {
        "delta" => {
            let a1 = *fields.get("A1").ok_or_else(|| err(line, "delta header missing A1"))?;
            let a2 = *fields.get("A2").ok_or_else(|| err(line, "delta header missing A2"))?;
            if a1 < 3 || a2 < 3 || a1 == a2 || a1 % 2 == 0 || a2 % 2 == 0 {
                return Err(err(line, "delta constants must be distinct odd values > 2"));
            }
            prog.code = Some(CodeParams { a1, a2 });
        }
        "haft" => {
            let r = *fields
                .get("max_retries")
                .ok_or_else(|| err(line, "haft header missing max_retries"))?;
            if r < 1 || r > u32::MAX as Word {
                return Err(err(line, "max_retries must be >= 1"));
            }
            prog.max_retries = Some(r as u32);
        }
        other => return Err(err(line, format!("unknown header `{other}`"))),
    }
    Ok(())
}

struct Operands<'a, 'b> {
    line: usize,
    labels: &'b BTreeMap<String, usize>,
    ops: &'b [&'a str],
    len: usize,
}

impl Operands<'_, '_> {
    fn reg(&self, i: usize) -> Result<Reg, SyntaxError> {
        let tok = self.ops[i];
        let digits = tok
            .strip_prefix('r')
            .ok_or_else(|| err(self.line, format!("expected register, found `{tok}`")))?;
        let idx: usize = digits
            .parse()
            .map_err(|_| err(self.line, format!("bad register `{tok}`")))?;
        Reg::new(idx).ok_or_else(|| err(self.line, format!("register index {idx} >= 64")))
    }

    fn imm(&self, i: usize) -> Result<Word, SyntaxError> {
        let tok = self.ops[i];
        tok.parse()
            .map_err(|_| err(self.line, format!("bad immediate `{tok}`")))
    }

    fn target(&self, i: usize) -> Result<usize, SyntaxError> {
        let tok = self.ops[i];
        let idx = if let Ok(n) = tok.parse::<usize>() {
            n
        } else if is_ident(tok) {
            *self
                .labels
                .get(tok)
                .ok_or_else(|| err(self.line, format!("undefined label `{tok}`")))?
        } else {
            return Err(err(self.line, format!("bad branch target `{tok}`")));
        };
        if idx >= self.len {
            return Err(err(self.line, format!("branch target {idx} out of range")));
        }
        Ok(idx)
    }
}

fn lane_of(suffix: &str, line: usize) -> Result<Lane, SyntaxError> {
    match suffix {
        "1" => Ok(Lane::One),
        "2" => Ok(Lane::Two),
        _ => Err(err(line, format!("bad lane `.{suffix}`"))),
    }
}

fn arity(mnemonic: &str) -> Option<usize> {
    let base = mnemonic.split('.').next().unwrap_or(mnemonic);
    Some(match base {
        "halt" | "txbegin" | "txend" => 0,
        "jmp" | "out" | "dout" => 1,
        "const" | "mov" | "br" | "alloc" | "in" | "chk" | "enc" | "dchk" => 2,
        "add" | "sub" | "mul" | "divs" | "and" | "or" | "xor" | "shl" | "shr" | "eq" | "lt"
        | "load" | "store" | "emul" | "deq" | "dlt" | "dalloc" | "eload" | "estore" => 3,
        _ => return None,
    })
}

fn build(mnemonic: &str, o: &Operands) -> Result<Instruction, SyntaxError> {
    use Instruction::*;
    let line = o.line;
    let (base, lane) = match mnemonic.split_once('.') {
        Some((b, s)) => (b, Some(lane_of(s, line)?)),
        None => (mnemonic, None),
    };
    let laned = matches!(base, "enc" | "emul" | "deq" | "dlt" | "eload" | "estore");
    if laned != lane.is_some() {
        return Err(err(line, format!("unknown opcode `{mnemonic}`")));
    }
    let lane = lane.unwrap_or(Lane::One);
    if let Some(op) = BinOp::ALL.iter().copied().find(|op| op.mnemonic() == base) {
        return Ok(Bin { op, dst: o.reg(0)?, lhs: o.reg(1)?, rhs: o.reg(2)? });
    }
    Ok(match base {
        "const" => Const { dst: o.reg(0)?, imm: o.imm(1)? },
        "mov" => Mov { dst: o.reg(0)?, src: o.reg(1)? },
        "br" => Br { cond: o.reg(0)?, target: o.target(1)? },
        "jmp" => Jmp { target: o.target(0)? },
        "alloc" => Alloc { dst: o.reg(0)?, size: o.reg(1)? },
        "load" => Load { dst: o.reg(0)?, obj: o.reg(1)?, off: o.reg(2)? },
        "store" => Store { obj: o.reg(0)?, off: o.reg(1)?, src: o.reg(2)? },
        "in" => In { dst: o.reg(0)?, idx: o.imm(1)? },
        "out" => Out { src: o.reg(0)? },
        "halt" => Halt,
        "txbegin" => TxBegin,
        "txend" => TxEnd,
        "chk" => Chk { a: o.reg(0)?, b: o.reg(1)? },
        "enc" => Enc { lane, dst: o.reg(0)?, src: o.reg(1)? },
        "emul" => EncMul { lane, dst: o.reg(0)?, lhs: o.reg(1)?, rhs: o.reg(2)? },
        "deq" | "dlt" => EncCmp {
            lane,
            op: if base == "deq" { BinOp::Eq } else { BinOp::Lt },
            dst: o.reg(0)?,
            lhs: o.reg(1)?,
            rhs: o.reg(2)?,
        },
        "dchk" => CodeChk { c1: o.reg(0)?, c2: o.reg(1)? },
        "dout" => DecOut { src: o.reg(0)? },
        "dalloc" => EncAlloc { dst1: o.reg(0)?, dst2: o.reg(1)?, size: o.reg(2)? },
        "eload" => EncLoad { lane, dst: o.reg(0)?, obj: o.reg(1)?, off: o.reg(2)? },
        "estore" => EncStore { lane, obj: o.reg(0)?, off: o.reg(1)?, src: o.reg(2)? },
        _ => return Err(err(line, format!("unknown opcode `{mnemonic}`"))),
    })
}

/// Parse IR assembly into a resolved program.
///
/// Labels may be referenced before they are defined; numeric targets are
/// accepted as well, which is what canonical serialization produces.
pub fn parse_program(text: &str) -> Result<IRProgram, SyntaxError> {
    let mut prog = IRProgram::default();
    let mut pending: Vec<(usize, &str, Vec<&str>)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        match classify(raw) {
            None => {}
            Some(Line::Header(h)) => parse_header(h, line, &mut prog)?,
            Some(Line::Label(name)) => {
                if !is_ident(name) {
                    return Err(err(line, format!("bad label `{name}`")));
                }
                if prog.labels.insert(name.to_string(), pending.len()).is_some() {
                    return Err(err(line, format!("duplicate label `{name}`")));
                }
            }
            Some(Line::Inst { mnemonic, operands }) => pending.push((line, mnemonic, operands)),
        }
    }

    let len = pending.len();
    for (line, mnemonic, ops) in &pending {
        let expected = arity(mnemonic).ok_or_else(|| err(*line, format!("unknown opcode `{mnemonic}`")))?;
        if ops.len() != expected {
            return Err(err(
                *line,
                format!("`{mnemonic}` takes {expected} operands, found {}", ops.len()),
            ));
        }
        let o = Operands { line: *line, labels: &prog.labels, ops, len };
        let inst = build(mnemonic, &o)?;
        if inst.is_encoded() && prog.code.is_none() {
            return Err(err(*line, format!("`{mnemonic}` requires a delta header")));
        }
        prog.instructions.push(inst);
    }
    Ok(prog)
}
