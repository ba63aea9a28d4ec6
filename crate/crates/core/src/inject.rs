//! Software-implemented fault injection.
//!
//! A campaign performs one fault-free golden run per program variant, then
//! draws `runs` single faults from a seeded counter-based generator (run `i`
//! uses stream `i`, so runs are independent and may execute in any order) and
//! classifies every faulty run against the golden output.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enclave::measure;
use crate::ir::{
    BinOp, ExecResult, Hooks, IRProgram, Instruction, Limits, Machine, Reg, Status, Word, NUM_REGS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultModel {
    RegBitflip,
    MemBitflip,
    OpcodeCorrupt,
}

impl FaultModel {
    pub fn as_str(self) -> &'static str {
        match self {
            FaultModel::RegBitflip => "reg-bitflip",
            FaultModel::MemBitflip => "mem-bitflip",
            FaultModel::OpcodeCorrupt => "opcode-corrupt",
        }
    }
}

impl fmt::Display for FaultModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FaultModel {
    type Err = CampaignError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reg-bitflip" => Ok(FaultModel::RegBitflip),
            "mem-bitflip" => Ok(FaultModel::MemBitflip),
            "opcode-corrupt" => Ok(FaultModel::OpcodeCorrupt),
            other => Err(CampaignError::Config(format!("unknown fault model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultTarget {
    Register(Reg),
    Cell { handle: Word, offset: Word },
    /// The `k mod n`-th of the `n` written heap cells at injection time.
    AnyCell(u64),
    Instruction(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultSpec {
    pub model: FaultModel,
    /// 1-based dynamic instruction index; the fault lands just before it executes.
    pub step: u64,
    pub target: FaultTarget,
    pub bit: u8,
    pub persistent: bool,
}

impl FaultSpec {
    pub fn reg(step: u64, reg: usize, bit: u8) -> FaultSpec {
        FaultSpec {
            model: FaultModel::RegBitflip,
            step,
            target: FaultTarget::Register(Reg::new(reg).expect("register index")),
            bit,
            persistent: false,
        }
    }

    pub fn persistent(mut self) -> FaultSpec {
        self.persistent = true;
        self
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        if self.bit >= 64 {
            return Err(CampaignError::InvalidFault(format!("bit {} >= 64", self.bit)));
        }
        if self.step < 1 {
            return Err(CampaignError::InvalidFault("step must be >= 1".into()));
        }
        let consistent = matches!(
            (self.model, self.target),
            (FaultModel::RegBitflip, FaultTarget::Register(_))
                | (FaultModel::MemBitflip, FaultTarget::Cell { .. } | FaultTarget::AnyCell(_))
                | (FaultModel::OpcodeCorrupt, FaultTarget::Instruction(_))
        );
        if !consistent {
            return Err(CampaignError::InvalidFault(format!(
                "target {:?} does not fit model {}",
                self.target, self.model
            )));
        }
        Ok(())
    }
}

/// Design-fault stand-in: every ALU opcode maps to a different one.
pub fn corrupt_opcode(op: BinOp) -> BinOp {
    match op {
        BinOp::Add => BinOp::Sub,
        BinOp::Sub => BinOp::Xor,
        BinOp::Xor => BinOp::Or,
        BinOp::Or => BinOp::And,
        BinOp::And => BinOp::Mul,
        BinOp::Mul => BinOp::Add,
        BinOp::Divs => BinOp::Shl,
        BinOp::Shl => BinOp::Shr,
        BinOp::Shr => BinOp::Divs,
        BinOp::Lt => BinOp::Eq,
        BinOp::Eq => BinOp::Lt,
    }
}

/// Corrupted form of `inst`, or `None` if the opcode has no table entry.
pub fn corrupt(inst: &Instruction) -> Option<Instruction> {
    match *inst {
        Instruction::Bin { op, dst, lhs, rhs } => Some(Instruction::Bin { op: corrupt_opcode(op), dst, lhs, rhs }),
        Instruction::EncCmp { lane, op, dst, lhs, rhs } => {
            Some(Instruction::EncCmp { lane, op: corrupt_opcode(op), dst, lhs, rhs })
        }
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CampaignError {
    #[error("golden run of the {variant} program ended with {status}")]
    GoldenFailure { variant: &'static str, status: Status },
    #[error("invalid campaign configuration: {0}")]
    Config(String),
    #[error("invalid fault: {0}")]
    InvalidFault(String),
}

pub fn golden_run(p: &IRProgram, input: &[Word], limits: Limits) -> Result<ExecResult, CampaignError> {
    let r = Machine::new(p, input, limits).run(&mut Hooks::default());
    match r.status {
        Status::Halted => Ok(r),
        status => Err(CampaignError::GoldenFailure { variant: "target", status }),
    }
}

fn apply_data_fault(m: &mut Machine<'_>, fault: &FaultSpec) {
    let mask: Word = 1 << fault.bit;
    match fault.target {
        FaultTarget::Register(r) => m.state_mut().regs[r.index()] ^= mask,
        FaultTarget::Cell { handle, offset } => {
            m.state_mut().heap.flip(handle, offset, mask);
        }
        FaultTarget::AnyCell(k) => {
            let heap = &mut m.state_mut().heap;
            let n = heap.written_cells();
            if n > 0 {
                if let Some((h, off)) = heap.nth_written_cell((k % n as u64) as usize) {
                    heap.flip(h, off, mask);
                }
            }
        }
        FaultTarget::Instruction(_) => {}
    }
}

/// Run `p` with one injected fault.
///
/// Persistent register faults are re-applied every time a rollback brings
/// execution back to the injection point; persistent opcode faults stay in
/// effect from `step` on. Transient opcode faults hit only the first execution
/// of the target instruction at or after `step`.
pub fn inject_run(p: &IRProgram, input: &[Word], fault: &FaultSpec, limits: Limits) -> ExecResult {
    let mut m = Machine::new(p, input, limits);
    let mut hooks = Hooks::default();
    let corrupted = match fault.target {
        FaultTarget::Instruction(i) if fault.model == FaultModel::OpcodeCorrupt => {
            p.instructions.get(i).and_then(corrupt).map(|c| (i, c))
        }
        _ => None,
    };
    let mut armed_at: Option<(usize, u64)> = None;
    let mut patch_live = false;
    loop {
        if m.status().is_some() {
            break;
        }
        let step = m.state().dyn_insts + 1;
        let pc = m.state().pc;
        if step == fault.step {
            if let Some((i, c)) = corrupted {
                m.set_patch(i, c);
                patch_live = true;
            } else {
                apply_data_fault(&mut m, fault);
                armed_at = Some((pc, m.rollbacks()));
            }
        } else if let Some((at_pc, seen)) = armed_at {
            if fault.persistent && pc == at_pc && m.rollbacks() > seen {
                apply_data_fault(&mut m, fault);
                armed_at = Some((pc, m.rollbacks()));
            }
        }
        let hits_patch = patch_live && corrupted.map(|(i, _)| i) == Some(pc);
        m.step(&mut hooks);
        if hits_patch && !fault.persistent {
            m.clear_patch();
            patch_live = false;
        }
    }
    m.result()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeClass {
    Masked,
    Detected,
    Sdc,
    Crashed,
    Hang,
}

pub fn classify(result: &ExecResult, golden_output: &[Word]) -> OutcomeClass {
    match result.status {
        Status::Halted if result.output == golden_output => OutcomeClass::Masked,
        Status::Halted => OutcomeClass::Sdc,
        Status::Detected(_) => OutcomeClass::Detected,
        Status::Crashed(_) => OutcomeClass::Crashed,
        Status::HangLimit => OutcomeClass::Hang,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub masked: u64,
    pub detected: u64,
    pub sdc: u64,
    pub crashed: u64,
    pub hang: u64,
}

impl Counts {
    pub fn add(&mut self, class: OutcomeClass) {
        match class {
            OutcomeClass::Masked => self.masked += 1,
            OutcomeClass::Detected => self.detected += 1,
            OutcomeClass::Sdc => self.sdc += 1,
            OutcomeClass::Crashed => self.crashed += 1,
            OutcomeClass::Hang => self.hang += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.masked + self.detected + self.sdc + self.crashed + self.hang
    }

    pub fn merge(mut self, other: Counts) -> Counts {
        self.masked += other.masked;
        self.detected += other.detected;
        self.sdc += other.sdc;
        self.crashed += other.crashed;
        self.hang += other.hang;
        self
    }

    pub fn rates(&self) -> Rates {
        let n = self.total().max(1) as f64;
        Rates {
            masked: self.masked as f64 / n,
            detected: self.detected as f64 / n,
            sdc: self.sdc as f64 / n,
            crashed: self.crashed as f64 / n,
            hang: self.hang as f64 / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rates {
    pub masked: f64,
    pub detected: f64,
    pub sdc: f64,
    pub crashed: f64,
    pub hang: f64,
}

/// Masked runs split by whether a rollback was needed to get there.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Breakdown {
    /// Fault never influenced the outcome and no rollback happened.
    pub masked_benign: u64,
    /// Fault was detected and rolled back, and the run then finished correctly.
    pub masked_recovered: u64,
    /// Runs where the fault had some observable effect (everything but benign).
    pub manifested: u64,
    /// `masked_recovered / manifested`.
    pub recovered_of_manifested: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Overhead {
    pub dyn_inst_ratio: f64,
    pub cycle_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CampaignParams {
    pub model: FaultModel,
    pub runs: u64,
    pub input: Vec<Word>,
    pub target: &'static str,
    pub program_sha256: String,
    pub hardened_sha256: Option<String>,
    pub golden_dyn_insts: u64,
    pub step_distribution: &'static str,
    pub site_distribution: &'static str,
    pub bit_distribution: &'static str,
    pub hang_cap_factor: u64,
    pub hang_cap_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CampaignReport {
    pub params: CampaignParams,
    pub seed: u64,
    pub counts: Counts,
    pub rates: Rates,
    pub breakdown: Breakdown,
    pub overhead: Overhead,
}

const CSV_HEADER: &str = "seed,model,runs,target,masked,detected,sdc,crashed,hang,\
rate_masked,rate_detected,rate_sdc,rate_crashed,rate_hang,masked_benign,masked_recovered,\
dyn_inst_ratio,cycle_ratio";

impl CampaignReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn csv_header() -> &'static str {
        CSV_HEADER
    }

    pub fn csv_row(&self) -> String {
        let c = &self.counts;
        let r = &self.rates;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.params.model,
            self.params.runs,
            self.params.target,
            c.masked,
            c.detected,
            c.sdc,
            c.crashed,
            c.hang,
            r.masked,
            r.detected,
            r.sdc,
            r.crashed,
            r.hang,
            self.breakdown.masked_benign,
            self.breakdown.masked_recovered,
            self.overhead.dyn_inst_ratio,
            self.overhead.cycle_ratio
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", CSV_HEADER, self.csv_row())
    }
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub program: IRProgram,
    /// When present, faults go into this variant and `program` is the baseline.
    pub hardened: Option<IRProgram>,
    pub input: Vec<Word>,
    pub runs: u64,
    pub seed: u64,
    pub model: FaultModel,
    pub hang_factor: u64,
}

pub const HANG_FACTOR: u64 = 10;

impl CampaignConfig {
    pub fn new(
        program: IRProgram,
        input: Vec<Word>,
        model: FaultModel,
        runs: u64,
        seed: u64,
    ) -> Result<CampaignConfig, CampaignError> {
        let cfg = CampaignConfig { program, hardened: None, input, runs, seed, model, hang_factor: HANG_FACTOR };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_hardened(mut self, hardened: IRProgram) -> Self {
        self.hardened = Some(hardened);
        self
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        if self.runs < 1 {
            return Err(CampaignError::Config("runs must be >= 1".into()));
        }
        if self.hang_factor < 1 {
            return Err(CampaignError::Config("hang factor must be >= 1".into()));
        }
        Ok(())
    }

    pub fn target(&self) -> &IRProgram {
        self.hardened.as_ref().unwrap_or(&self.program)
    }
}

/// Fault for run `index`; a pure function of `(seed, index)`.
pub fn draw_fault(
    seed: u64,
    index: u64,
    model: FaultModel,
    target: &IRProgram,
    golden_len: u64,
) -> FaultSpec {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let step = rng.gen_range(1..=golden_len.max(1));
    match model {
        FaultModel::RegBitflip => {
            let reg = rng.gen_range(0..NUM_REGS);
            let bit = rng.gen_range(0..64u8);
            FaultSpec::reg(step, reg, bit)
        }
        FaultModel::MemBitflip => FaultSpec {
            model,
            step,
            target: FaultTarget::AnyCell(rng.gen()),
            bit: rng.gen_range(0..64u8),
            persistent: false,
        },
        FaultModel::OpcodeCorrupt => {
            let sites: Vec<usize> = target
                .instructions
                .iter()
                .enumerate()
                .filter(|(_, i)| corrupt(i).is_some())
                .map(|(i, _)| i)
                .collect();
            let site = if sites.is_empty() { 0 } else { sites[rng.gen_range(0..sites.len())] };
            FaultSpec { model, step, target: FaultTarget::Instruction(site), bit: 0, persistent: false }
        }
    }
}

fn golden(p: &IRProgram, input: &[Word], variant: &'static str) -> Result<ExecResult, CampaignError> {
    golden_run(p, input, Limits::default()).map_err(|e| match e {
        CampaignError::GoldenFailure { status, .. } => CampaignError::GoldenFailure { variant, status },
        other => other,
    })
}

pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignReport, CampaignError> {
    cfg.validate()?;
    let base = golden(&cfg.program, &cfg.input, "baseline")?;
    let (target, gold) = match &cfg.hardened {
        Some(h) => (h, golden(h, &cfg.input, "hardened")?),
        None => (&cfg.program, base.clone()),
    };
    if cfg.hardened.is_some() && gold.output != base.output {
        return Err(CampaignError::Config("hardened program output differs from baseline".into()));
    }
    let cap = gold.dyn_insts.max(1) * cfg.hang_factor;
    let limits = Limits::new(cap);

    let outcomes: Vec<(OutcomeClass, bool)> = (0..cfg.runs)
        .into_par_iter()
        .map(|i| {
            let fault = draw_fault(cfg.seed, i, cfg.model, target, gold.dyn_insts);
            let r = inject_run(target, &cfg.input, &fault, limits);
            (classify(&r, &gold.output), r.rollbacks > 0)
        })
        .collect();

    let mut counts = Counts::default();
    let mut recovered = 0;
    for &(class, rolled_back) in &outcomes {
        counts.add(class);
        if class == OutcomeClass::Masked && rolled_back {
            recovered += 1;
        }
    }
    let benign = counts.masked - recovered;
    let manifested = counts.total() - benign;
    let breakdown = Breakdown {
        masked_benign: benign,
        masked_recovered: recovered,
        manifested,
        recovered_of_manifested: if manifested == 0 { 0.0 } else { recovered as f64 / manifested as f64 },
    };
    let overhead = Overhead {
        dyn_inst_ratio: gold.dyn_insts as f64 / base.dyn_insts.max(1) as f64,
        cycle_ratio: gold.cycles as f64 / base.cycles.max(1) as f64,
    };
    let (step_distribution, site_distribution, bit_distribution) = match cfg.model {
        FaultModel::RegBitflip => ("uniform over golden dynamic length", "uniform over r0..r63", "uniform over 0..63"),
        FaultModel::MemBitflip => (
            "uniform over golden dynamic length",
            "uniform over written heap cells at injection time",
            "uniform over 0..63",
        ),
        FaultModel::OpcodeCorrupt => (
            "uniform over golden dynamic length",
            "uniform over corruptible ALU instructions",
            "not applicable",
        ),
    };
    Ok(CampaignReport {
        params: CampaignParams {
            model: cfg.model,
            runs: cfg.runs,
            input: cfg.input.clone(),
            target: if cfg.hardened.is_some() { "hardened" } else { "baseline" },
            program_sha256: measure(&cfg.program).to_hex(),
            hardened_sha256: cfg.hardened.as_ref().map(|h| measure(h).to_hex()),
            golden_dyn_insts: gold.dyn_insts,
            step_distribution,
            site_distribution,
            bit_distribution,
            hang_cap_factor: cfg.hang_factor,
            hang_cap_steps: cap,
        },
        seed: cfg.seed,
        rates: counts.rates(),
        counts,
        breakdown,
        overhead,
    })
}

/// Every `(step, register, bit)` register flip of `target`, classified.
pub fn exhaustive_reg_campaign(target: &IRProgram, input: &[Word]) -> Result<Counts, CampaignError> {
    let gold = golden_run(target, input, Limits::default())?;
    let limits = Limits::new(gold.dyn_insts.max(1) * HANG_FACTOR);
    let counts = (1..=gold.dyn_insts)
        .into_par_iter()
        .map(|step| {
            let mut c = Counts::default();
            for reg in 0..NUM_REGS {
                for bit in 0..64u8 {
                    let r = inject_run(target, input, &FaultSpec::reg(step, reg, bit), limits);
                    c.add(classify(&r, &gold.output));
                }
            }
            c
        })
        .reduce(Counts::default, Counts::merge);
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SUM_LOOP;
    use crate::ir::{parse_program, DetectReason};

    #[test]
    fn opcode_table_is_a_derangement() {
        let mut images: Vec<BinOp> = BinOp::ALL.iter().map(|&o| corrupt_opcode(o)).collect();
        for op in BinOp::ALL {
            assert_ne!(corrupt_opcode(op), op);
        }
        images.sort_by_key(|o| o.mnemonic());
        images.dedup();
        assert_eq!(images.len(), BinOp::ALL.len(), "table is a permutation");
        assert_eq!(corrupt_opcode(BinOp::Add), BinOp::Sub);
        assert_eq!(corrupt_opcode(BinOp::Mul), BinOp::Add);
        assert_eq!(corrupt_opcode(BinOp::Lt), BinOp::Eq);
    }

    #[test]
    fn golden_failure_is_reported() {
        let p = parse_program("const r1, 0\ndivs r2, r1, r1\nhalt").unwrap();
        assert!(matches!(golden_run(&p, &[], Limits::default()), Err(CampaignError::GoldenFailure { .. })));
    }

    #[test]
    fn zero_runs_rejected() {
        let e = CampaignConfig::new(SUM_LOOP.parse(), vec![], FaultModel::RegBitflip, 0, 1).unwrap_err();
        assert!(matches!(e, CampaignError::Config(_)));
    }

    #[test]
    fn fault_validation() {
        assert!(FaultSpec::reg(0, 1, 1).validate().is_err());
        assert!(FaultSpec::reg(1, 1, 64).validate().is_err());
        let mut f = FaultSpec::reg(1, 1, 1);
        f.model = FaultModel::MemBitflip;
        assert!(f.validate().is_err());
    }

    #[test]
    fn dead_register_flip_is_masked() {
        let p = SUM_LOOP.parse();
        let r = inject_run(&p, &[], &FaultSpec::reg(5, 30, 7), Limits::new(450));
        assert_eq!(classify(&r, &[55]), OutcomeClass::Masked);
    }

    #[test]
    fn persistent_opcode_fault_changes_result() {
        let p = SUM_LOOP.parse();
        // instruction 3 is the accumulating add
        let f = FaultSpec {
            model: FaultModel::OpcodeCorrupt,
            step: 1,
            target: FaultTarget::Instruction(3),
            bit: 0,
            persistent: true,
        };
        let r = inject_run(&p, &[], &f, Limits::new(450));
        assert_eq!(r.output, vec![-55]);
        let transient = FaultSpec { persistent: false, ..f };
        let r = inject_run(&p, &[], &transient, Limits::new(450));
        // only the first add (0 + 10) becomes a subtraction
        assert_eq!(r.output, vec![55 - 20]);
    }

    #[test]
    fn classification_is_exhaustive() {
        let base = ExecResult { status: Status::Halted, output: vec![1], dyn_insts: 1, cycles: 1, rollbacks: 0 };
        let with = |status, output: Vec<Word>| ExecResult { status, output, ..base.clone() };
        assert_eq!(classify(&base, &[1]), OutcomeClass::Masked);
        assert_eq!(classify(&with(Status::Halted, vec![2]), &[1]), OutcomeClass::Sdc);
        assert_eq!(
            classify(&with(Status::Detected(DetectReason::CheckDivergence), vec![1]), &[1]),
            OutcomeClass::Detected
        );
        assert_eq!(
            classify(&with(Status::Crashed(crate::ir::Trap::DivByZero), vec![1]), &[1]),
            OutcomeClass::Crashed
        );
        assert_eq!(classify(&with(Status::HangLimit, vec![1]), &[1]), OutcomeClass::Hang);
    }
}
