//! Command-line front end. Each subcommand maps onto one library entry point;
//! failures carry the process exit code.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::boundless::BoundlessMemory;
use crate::delta::{transform_delta_banked, EncodingParams};
use crate::enclave::{EnclaveEnvelope, EnvelopeConfig};
use crate::haft::{transform_haft, HaftConfig};
use crate::inject::{run_campaign, CampaignConfig, CampaignError, CampaignReport, FaultModel, Overhead};
use crate::ir::{
    execute, parse_program, serialize_canonical, ExecResult, Hooks, IRProgram, Limits, MemHook, Status, Word,
    LOGICAL_REGS,
};
use crate::orchestrator::{simulate, ServiceSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_GOLDEN: i32 = 4;

/// Register bank offset for the second encoded copy when lock-step is layered on top.
pub const COMBINED_BANK: usize = 16;

#[derive(Debug, Parser)]
#[command(name = "hardex", version, about = "Hardened execution engine and fault-injection toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Haft,
    Delta,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Transform a program and write its canonical hardened form.
    Harden {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long = "in")]
        input_path: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Draw the code constants from the prime pool instead of using the defaults.
        #[arg(long)]
        seed: Option<u64>,
        /// Basic blocks per rollback region.
        #[arg(long, default_value_t = 1)]
        region_blocks: usize,
        #[arg(long, default_value_t = 3)]
        max_retries: u32,
    },
    /// Execute a program and print its result as JSON.
    Run {
        #[arg(long = "in")]
        input_path: PathBuf,
        /// JSON array literal or path to a file holding one.
        #[arg(long)]
        input: Option<String>,
        /// Envelope configuration JSON; runs inside a simulated enclave.
        #[arg(long)]
        enclave: Option<PathBuf>,
        /// Tolerate bounded out-of-bounds accesses.
        #[arg(long)]
        boundless: bool,
        #[arg(long, default_value_t = 10_000_000)]
        max_steps: u64,
    },
    /// Run a seeded fault-injection campaign.
    Inject {
        #[arg(long = "in")]
        input_path: PathBuf,
        /// Hardened variant of the program; faults are injected into it.
        #[arg(long)]
        hardened: Option<PathBuf>,
        #[arg(long)]
        model: FaultModel,
        #[arg(long)]
        runs: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        input: Option<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Simulate a replicated service and write a JSON report.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Simulated seconds.
        #[arg(long)]
        duration: f64,
        /// Request arrivals per simulated second.
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Compare dynamic instruction and cycle counts of two programs.
    Measure {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        hardened: PathBuf,
        #[arg(long)]
        input: Option<String>,
    },
}

impl clap::builder::ValueParserFactory for FaultModel {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<FaultModel>().map_err(|e| e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        CliError { code: EXIT_RUNTIME, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<CampaignError> for CliError {
    fn from(e: CampaignError) -> Self {
        let code = match e {
            CampaignError::GoldenFailure { .. } => EXIT_GOLDEN,
            _ => EXIT_CONFIG,
        };
        CliError { code, message: e.to_string() }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &[u8]) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn load_program(path: &Path) -> Result<IRProgram, CliError> {
    parse_program(&read_text(path)?).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Parse `--input`: a JSON integer array literal, or a path to a file containing one.
pub fn parse_input(arg: Option<&str>) -> Result<Vec<Word>, CliError> {
    let Some(arg) = arg else { return Ok(Vec::new()) };
    let text = if arg.trim_start().starts_with('[') { arg.to_string() } else { read_text(Path::new(arg))? };
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("input vector: {e}")))
}

/// Static size ratio; defined as 1 for an empty original.
pub fn instruction_ratio(original: &IRProgram, hardened: &IRProgram) -> f64 {
    if original.is_empty() {
        1.0
    } else {
        hardened.len() as f64 / original.len() as f64
    }
}

pub fn cmd_harden(p: &IRProgram, mode: Mode, seed: Option<u64>, haft_cfg: &HaftConfig) -> Result<IRProgram, CliError> {
    let params = || -> Result<EncodingParams, CliError> {
        let defaults = EncodingParams::default();
        match seed {
            Some(s) => defaults.draw(s).map_err(|e| CliError::config(e.to_string())),
            None => Ok(defaults),
        }
    };
    let haft = |q: &IRProgram| transform_haft(q, haft_cfg).map_err(|e| CliError::config(e.to_string()));
    let delta = |q: &IRProgram, bank| {
        transform_delta_banked(q, &params()?, bank).map_err(|e| CliError::config(e.to_string()))
    };
    match mode {
        Mode::Haft => haft(p),
        Mode::Delta => delta(p, LOGICAL_REGS),
        Mode::Both => haft(&delta(p, COMBINED_BANK)?),
    }
}

pub fn cmd_measure(baseline: &IRProgram, hardened: &IRProgram, input: &[Word]) -> Result<Overhead, CliError> {
    let run = |p: &IRProgram, which: &str| {
        let r = execute(p, input, Limits::default(), &mut Hooks::default());
        if r.status != Status::Halted {
            return Err(CliError::runtime(format!("{which} run ended with {}", r.status)));
        }
        Ok(r)
    };
    let b = run(baseline, "baseline")?;
    let h = run(hardened, "hardened")?;
    Ok(Overhead {
        dyn_inst_ratio: h.dyn_insts as f64 / b.dyn_insts.max(1) as f64,
        cycle_ratio: h.cycles as f64 / b.cycles.max(1) as f64,
    })
}

#[derive(Debug, Serialize)]
struct RunReport<'a> {
    #[serde(flatten)]
    result: &'a ExecResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    measurement: Option<String>,
}

fn cmd_run(
    p: IRProgram,
    input: &[Word],
    enclave: Option<&Path>,
    boundless: bool,
    max_steps: u64,
) -> Result<(ExecResult, Option<String>), CliError> {
    if max_steps == 0 {
        return Err(CliError::config("max-steps must be > 0"));
    }
    let limits = Limits::new(max_steps);
    let mut mem = boundless.then(BoundlessMemory::default);
    let mem_hook = mem.as_mut().map(|m| m as &mut dyn MemHook);
    match enclave {
        Some(path) => {
            let cfg = EnvelopeConfig::load(path).map_err(|e| CliError::config(e.to_string()))?;
            let mut env = EnclaveEnvelope::new(p, [0u8; 32], &cfg, 0);
            let m = env.measurement();
            if !cfg.expected_measurements.is_empty() && !cfg.expected_measurements.contains(&m) {
                return Err(CliError::runtime(format!("measurement {m} is not in expected_measurements")));
            }
            Ok((env.execute_with(input, limits, mem_hook), Some(m.to_hex())))
        }
        None => {
            let mut hooks = Hooks { mem: mem_hook, ..Default::default() };
            Ok((execute(&p, input, limits, &mut hooks), None))
        }
    }
}

/// Execute a parsed command; returns what should go to stdout.
pub fn dispatch(command: Command) -> Result<String, CliError> {
    match command {
        Command::Harden { mode, input_path, out, seed, region_blocks, max_retries } => {
            let p = load_program(&input_path)?;
            let h = cmd_harden(&p, mode, seed, &HaftConfig { region_blocks, max_retries })?;
            write_text(&out, &serialize_canonical(&h))?;
            Ok(format!("instruction ratio: {:.3}\n", instruction_ratio(&p, &h)))
        }
        Command::Run { input_path, input, enclave, boundless, max_steps } => {
            let p = load_program(&input_path)?;
            let input = parse_input(input.as_deref())?;
            let (r, measurement) = cmd_run(p, &input, enclave.as_deref(), boundless, max_steps)?;
            let text = serde_json::to_string(&RunReport { result: &r, measurement }).expect("result serializes");
            if r.status != Status::Halted {
                return Err(CliError::runtime(text));
            }
            Ok(text + "\n")
        }
        Command::Inject { input_path, hardened, model, runs, seed, report, input, csv } => {
            let p = load_program(&input_path)?;
            let input = parse_input(input.as_deref())?;
            let mut cfg = CampaignConfig::new(p, input, model, runs, seed)?;
            if let Some(h) = hardened {
                cfg = cfg.with_hardened(load_program(&h)?);
            }
            let rep: CampaignReport = run_campaign(&cfg)?;
            write_text(&report, rep.to_json().as_bytes())?;
            if let Some(csv) = csv {
                write_text(&csv, rep.to_csv().as_bytes())?;
            }
            let r = rep.rates;
            Ok(format!(
                "masked {:.4} detected {:.4} sdc {:.4} crashed {:.4} hang {:.4}\n",
                r.masked, r.detected, r.sdc, r.crashed, r.hang
            ))
        }
        Command::Simulate { config, seed, duration, rate, report } => {
            let spec = ServiceSpec::load(&config).map_err(|e| CliError::config(e.to_string()))?;
            let rep = simulate(&spec, rate, duration, seed).map_err(|e| CliError::config(e.to_string()))?;
            write_text(&report, rep.to_json().as_bytes())?;
            Ok(format!(
                "completed {} failed {} availability {:.4} respawns {}\n",
                rep.completed, rep.failed, rep.availability, rep.respawns
            ))
        }
        Command::Measure { baseline, hardened, input } => {
            let b = load_program(&baseline)?;
            let h = load_program(&hardened)?;
            let input = parse_input(input.as_deref())?;
            let o = cmd_measure(&b, &h, &input)?;
            Ok(serde_json::to_string(&o).expect("overhead serializes") + "\n")
        }
    }
}
