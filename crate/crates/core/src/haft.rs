//! Software lock-step with rollback recovery.
//!
//! Logical register `rK` becomes a master copy in `rK` and a shadow copy in
//! `r(K+32)`. Computation is issued once per bank; before any externally
//! visible effect (store, branch, output, allocation size) the master and
//! shadow operands are compared with `chk`. Basic blocks are grouped into
//! rollback regions delimited by `txbegin`/`txend`, so a divergence observed
//! inside a region is retried from its checkpoint instead of stopping the run.

use thiserror::Error;

use crate::ir::{
    Hooks, IRProgram, Instruction, Limits, Machine, Reg, Word, ExecResult, LOGICAL_REGS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HaftConfig {
    /// Basic blocks per rollback region.
    pub region_blocks: usize,
    pub max_retries: u32,
}

impl Default for HaftConfig {
    fn default() -> Self {
        HaftConfig { region_blocks: 1, max_retries: 3 }
    }
}

impl HaftConfig {
    pub fn validate(&self) -> Result<(), TransformError> {
        if self.region_blocks < 1 {
            return Err(TransformError::Config("region_blocks must be >= 1".into()));
        }
        if self.max_retries < 1 {
            return Err(TransformError::Config("max_retries must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransformError {
    #[error("program uses r{0}; lock-step hardening needs registers below r32")]
    Register(usize),
    #[error("instruction {0} is already a lock-step pseudo-instruction")]
    AlreadyHardened(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
}

fn shadow(r: Reg) -> Reg {
    r.shifted(LOGICAL_REGS)
}

struct Emitter {
    out: Vec<Instruction>,
}

impl Emitter {
    fn push(&mut self, inst: Instruction) {
        self.out.push(inst);
    }

    fn twice(&mut self, inst: Instruction) {
        self.out.push(inst);
        self.out.push(inst.map_regs(shadow));
    }

    fn check(&mut self, regs: &[Reg]) {
        let mut seen: Vec<Reg> = Vec::with_capacity(regs.len());
        for &r in regs {
            if !seen.contains(&r) {
                seen.push(r);
                self.out.push(Instruction::Chk { a: r, b: shadow(r) });
            }
        }
    }
}

pub fn transform_haft(p: &IRProgram, cfg: &HaftConfig) -> Result<IRProgram, TransformError> {
    use Instruction::*;
    cfg.validate()?;
    if let Some(max) = p.max_register() {
        if max >= LOGICAL_REGS {
            return Err(TransformError::Register(max));
        }
    }
    if let Some(i) = p.instructions.iter().position(Instruction::is_lockstep_pseudo) {
        return Err(TransformError::AlreadyHardened(i));
    }

    let n = p.len();
    let mut region_start = vec![false; n];
    for (ordinal, leader) in p.block_leaders().into_iter().enumerate() {
        if ordinal % cfg.region_blocks == 0 {
            region_start[leader] = true;
        }
    }

    let mut em = Emitter { out: Vec::with_capacity(n * 2 + 8) };
    let mut new_index = Vec::with_capacity(n);
    for (i, inst) in p.instructions.iter().enumerate() {
        new_index.push(em.out.len());
        if region_start[i] {
            em.push(TxBegin);
        }
        match *inst {
            Const { .. } | Mov { .. } | Bin { .. } | Load { .. } | In { .. } => em.twice(*inst),
            Enc { .. } | EncMul { .. } | EncCmp { .. } | CodeChk { .. } | EncLoad { .. } => {
                em.twice(*inst)
            }
            Alloc { dst, size } => {
                em.check(&[size]);
                em.push(*inst);
                em.push(Mov { dst: shadow(dst), src: dst });
            }
            EncAlloc { dst1, dst2, size } => {
                em.check(&[size]);
                em.push(*inst);
                em.push(Mov { dst: shadow(dst1), src: dst1 });
                em.push(Mov { dst: shadow(dst2), src: dst2 });
            }
            Store { obj, off, src } | EncStore { obj, off, src, .. } => {
                em.check(&[obj, off, src]);
                em.push(*inst);
            }
            Br { cond, .. } => {
                em.check(&[cond]);
                em.push(*inst);
            }
            Jmp { .. } => em.push(*inst),
            Out { src } | DecOut { src } => {
                em.check(&[src]);
                em.push(TxEnd);
                em.push(*inst);
                let reopen = i + 1 < n
                    && !region_start[i + 1]
                    && !matches!(p.instructions[i + 1], Halt);
                if reopen {
                    em.push(TxBegin);
                }
            }
            // halt commits any open region itself
            Halt => em.push(Halt),
            TxBegin | TxEnd | Chk { .. } => return Err(TransformError::AlreadyHardened(i)),
        }
    }
    let mut out = em.out;
    for inst in out.iter_mut() {
        if let Some(t) = inst.target() {
            *inst = inst.with_target(new_index[t]);
        }
    }
    Ok(IRProgram {
        instructions: out,
        code: p.code,
        max_retries: Some(cfg.max_retries),
        ..Default::default()
    })
}

/// Execute a hardened program with region rollback and the retry budget of `cfg`.
pub fn run_protected(p_hardened: &IRProgram, input: &[Word], cfg: &HaftConfig, limits: Limits) -> ExecResult {
    Machine::new(p_hardened, input, limits)
        .with_max_retries(cfg.max_retries)
        .run(&mut Hooks::default())
}
