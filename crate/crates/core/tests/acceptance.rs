//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Report files land under
//! `$CARGO_TARGET_TMPDIR/acceptance/run-{1,2}`; the last criterion compares
//! the two runs byte for byte.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use hardex::boundless::{BoundlessMemory, SafetyPolicy};
use hardex::cli::{cmd_harden, cmd_measure, Mode};
use hardex::corpus::{CorpusProgram, OOB_RING, PAGE_SWEEP, WORKLOADS};
use hardex::delta::{decode_checked, encode, EncodedPair, EncodingParams, FUNCTIONAL_LIMIT};
use hardex::enclave::epc::DEFAULT_EPC_PAGES;
use hardex::enclave::{attest_handshake, CryptoError, EnclaveEnvelope, EnclaveError, EnvelopeConfig};
use hardex::haft::HaftConfig;
use hardex::inject::{run_campaign, CampaignConfig, Counts, FaultModel};
use hardex::ir::{execute, parse_program, DetectReason, Hooks, Limits, Status};
use hardex::orchestrator::{simulate, ScriptedCrash, ServiceSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const SEED: u64 = 42;

const MASK_RUNS_PER_PROGRAM: u64 = 2000;
const MASK_REGION_BLOCKS: usize = 8;
const MASK_MIN_MASKED: f64 = 0.85;
const MASK_MAX_SDC: f64 = 0.02;
const MASK_MIN_SDC_FACTOR: f64 = 5.0;
const MASK_TIME: Duration = Duration::from_secs(120);

const HAFT_RATIO: (f64, f64) = (1.8, 2.8);
const DELTA_RATIO: (f64, f64) = (2.0, 5.0);

const CODE_PAIRS: usize = 1000;
const CODE_TIME: Duration = Duration::from_secs(30);

const EPC_SMALL_MAX: f64 = 1.05;
const EPC_LARGE_MIN: f64 = 10.0;
const EPC_TIME: Duration = Duration::from_secs(10);

const TAMPER_MIN_POSITIONS: usize = 64;
const ENVELOPE_TIME: Duration = Duration::from_secs(10);

const OOB_EVENTS: usize = 200;

const SIM_AVAILABILITY: f64 = 0.95;

const SUITE_TIME: Duration = Duration::from_secs(300);

struct Verdict {
    name: &'static str,
    pass: bool,
}

struct Suite {
    dir: PathBuf,
    verdicts: Vec<Verdict>,
    verbose: bool,
}

impl Suite {
    fn new(dir: PathBuf, verbose: bool) -> Suite {
        std::fs::create_dir_all(&dir).expect("report dir");
        Suite { dir, verdicts: Vec::new(), verbose }
    }

    fn write(&self, name: &str, contents: &str) {
        std::fs::write(self.dir.join(name), contents).expect("report written");
    }

    fn record(&mut self, name: &'static str, pass: bool, detail: String) {
        if self.verbose {
            println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        }
        self.verdicts.push(Verdict { name, pass });
    }

    fn info(&self, line: String) {
        if self.verbose {
            println!("     {line}");
        }
    }
}

fn within(x: f64, (lo, hi): (f64, f64)) -> bool {
    (lo..=hi).contains(&x)
}

fn campaign(p: &CorpusProgram, hardened: Option<&HaftConfig>) -> hardex::inject::CampaignReport {
    let base = p.parse();
    let mut cfg =
        CampaignConfig::new(base.clone(), p.input.to_vec(), FaultModel::RegBitflip, MASK_RUNS_PER_PROGRAM, SEED)
            .expect("campaign config");
    if let Some(h) = hardened {
        cfg = cfg.with_hardened(cmd_harden(&base, Mode::Haft, None, h).expect("hardening"));
    }
    run_campaign(&cfg).expect("campaign")
}

fn haft_masking(s: &mut Suite) {
    let t = Instant::now();
    let grouped = HaftConfig { region_blocks: MASK_REGION_BLOCKS, ..Default::default() };
    let mut hardened = Counts::default();
    let mut plain = Counts::default();
    let mut per_block = Counts::default();
    for p in WORKLOADS {
        let h = campaign(&p, Some(&grouped));
        let b = campaign(&p, None);
        s.write(&format!("inject_{}_haft.json", p.name), &h.to_json());
        s.write(&format!("inject_{}_baseline.json", p.name), &b.to_json());
        hardened = hardened.merge(h.counts);
        plain = plain.merge(b.counts);
        per_block = per_block.merge(campaign(&p, Some(&HaftConfig::default())).counts);
    }
    let elapsed = t.elapsed();
    let (hr, br) = (hardened.rates(), plain.rates());
    let pass = hardened.total() >= 10_000
        && hr.masked >= MASK_MIN_MASKED
        && hr.sdc <= MASK_MAX_SDC
        && br.sdc >= MASK_MIN_SDC_FACTOR * hr.sdc
        && elapsed < MASK_TIME;
    s.record(
        "1 lock-step masking",
        pass,
        format!(
            "runs {} region_blocks {MASK_REGION_BLOCKS}: masked {:.4} sdc {:.4}; unhardened sdc {:.4} ({:.1}x); {:.1}s",
            hardened.total(),
            hr.masked,
            hr.sdc,
            br.sdc,
            br.sdc / hr.sdc.max(f64::MIN_POSITIVE),
            elapsed.as_secs_f64()
        ),
    );
    let pr = per_block.rates();
    s.info(format!("region_blocks 1 (default): masked {:.4} sdc {:.4}", pr.masked, pr.sdc));
}

fn overhead(s: &mut Suite, mode: Mode, band: (f64, f64), name: &'static str, tag: &str) {
    let mut ratios = Vec::new();
    let mut json = String::new();
    for p in WORKLOADS {
        let base = p.parse();
        let hardened = cmd_harden(&base, mode, None, &HaftConfig::default()).expect("hardening");
        let o = cmd_measure(&base, &hardened, p.input).expect("measure");
        json.push_str(&format!("{{\"program\":\"{}\",\"dyn_inst_ratio\":{},\"cycle_ratio\":{}}}\n", p.name, o.dyn_inst_ratio, o.cycle_ratio));
        ratios.push((p.name, o.dyn_inst_ratio));
    }
    s.write(&format!("overhead_{tag}.jsonl"), &json);
    let pass = ratios.iter().all(|&(_, r)| within(r, band));
    let listed: Vec<String> = ratios.iter().map(|(n, r)| format!("{n} {r:.3}")).collect();
    s.record(name, pass, format!("band [{}, {}]: {}", band.0, band.1, listed.join(", ")));
}

fn code_detection(s: &mut Suite) {
    let t = Instant::now();
    let params = EncodingParams::default().draw(SEED).expect("params");
    let code = params.code;
    let mut rng = ChaCha20Rng::seed_from_u64(SEED);
    let (mut trials, mut accepted) = (0u64, 0u64);
    for _ in 0..CODE_PAIRS {
        let x = rng.gen_range(-FUNCTIONAL_LIMIT + 1..FUNCTIONAL_LIMIT);
        let v = encode(x, code).expect("in range");
        assert_eq!(decode_checked(v, code), Ok(x));
        for bit in 0..128 {
            let flipped = if bit < 64 {
                EncodedPair { c1: v.c1 ^ (1 << bit), ..v }
            } else {
                EncodedPair { c2: v.c2 ^ (1 << (bit - 64)), ..v }
            };
            trials += 1;
            if decode_checked(flipped, code).is_ok() {
                accepted += 1;
            }
        }
    }
    let elapsed = t.elapsed();
    s.write("code_detection.txt", &format!("a1 {} a2 {} trials {trials} accepted {accepted}\n", code.a1, code.a2));
    s.record(
        "3 encoded single-bit detection",
        accepted == 0 && trials == CODE_PAIRS as u64 * 128 && elapsed < CODE_TIME,
        format!("A=({}, {}) {trials} flips, {accepted} silently accepted; {:.2}s", code.a1, code.a2, elapsed.as_secs_f64()),
    );
}

fn epc_threshold(s: &mut Suite) {
    let t = Instant::now();
    let p = PAGE_SWEEP.parse();
    let limits = Limits::new(100_000_000);
    let ratio = |input: &[i64]| {
        let native = execute(&p, input, limits, &mut Hooks::default());
        let mut env = EnclaveEnvelope::new(p.clone(), [0; 32], &EnvelopeConfig::default(), SEED);
        let shielded = env.execute(input, limits);
        assert_eq!(shielded.output, native.output);
        shielded.cycles as f64 / native.cycles as f64
    };
    let fits = ratio(&[DEFAULT_EPC_PAGES as i64 - 6, 1, 20]);
    let spills = ratio(&[4 * DEFAULT_EPC_PAGES as i64, 512, 20]);
    let elapsed = t.elapsed();
    s.write("epc.txt", &format!("fits {fits}\nspills {spills}\n"));
    s.record(
        "5 paging threshold",
        fits <= EPC_SMALL_MAX && spills > EPC_LARGE_MIN && elapsed < EPC_TIME,
        format!("fits {fits:.4} (<= {EPC_SMALL_MAX}), 4x capacity sweep {spills:.1} (> {EPC_LARGE_MIN}); {:.2}s", elapsed.as_secs_f64()),
    );
}

fn flip(bytes: &[u8], bit: usize) -> Vec<u8> {
    let mut b = bytes.to_vec();
    b[bit / 8] ^= 1 << (bit % 8);
    b
}

fn envelope_integrity(s: &mut Suite) {
    let t = Instant::now();
    let mut a = EnclaveEnvelope::new(parse_program("const r1, 1\nhalt").unwrap(), [1; 32], &EnvelopeConfig::default(), SEED);
    let b = EnclaveEnvelope::new(parse_program("const r1, 2\nhalt").unwrap(), [2; 32], &EnvelopeConfig::default(), SEED + 1);
    let psk = [7; 32];
    let expected: BTreeSet<_> = [b.measurement()].into();

    let sealed = a.seal_file("/state", b"service state").unwrap();
    let sealed_bits = sealed.len() * 8;
    let sealed_rejected = (0..sealed_bits)
        .filter(|&bit| a.unseal_file("/state", &flip(&sealed, bit)) == Err(EnclaveError::Crypto(CryptoError::Integrity)))
        .count();

    let (mut ci, cr) = attest_handshake(&a, &b, &expected, &psk, &psk, [3; 32], [4; 32]).unwrap();
    let frame = a.chan_send(&mut ci, b"request").unwrap();
    let frame_bits = frame.len() * 8;
    let frame_rejected = (0..frame_bits)
        .filter(|&bit| b.chan_recv(&mut cr.clone(), &flip(&frame, bit)).is_err())
        .count();

    let mut live = cr.clone();
    let first = b.chan_recv(&mut live, &frame).is_ok();
    let replay_rejected = matches!(b.chan_recv(&mut live, &frame), Err(EnclaveError::Crypto(CryptoError::Replay { .. })));

    let stranger: BTreeSet<_> = [a.measurement()].into();
    let handshake_rejected = attest_handshake(&a, &b, &stranger, &psk, &psk, [3; 32], [4; 32]).is_err();
    let elapsed = t.elapsed();

    s.write(
        "envelope.txt",
        &format!(
            "sealed {sealed_rejected}/{sealed_bits}\nframe {frame_rejected}/{frame_bits}\nreplay {replay_rejected}\nhandshake {handshake_rejected}\n"
        ),
    );
    let pass = sealed_bits >= TAMPER_MIN_POSITIONS
        && frame_bits >= TAMPER_MIN_POSITIONS
        && sealed_rejected == sealed_bits
        && frame_rejected == frame_bits
        && first
        && replay_rejected
        && handshake_rejected
        && elapsed < ENVELOPE_TIME;
    s.record(
        "6 envelope integrity",
        pass,
        format!(
            "sealed {sealed_rejected}/{sealed_bits}, frame {frame_rejected}/{frame_bits} tampers rejected; replay rejected {replay_rejected}; unexpected measurement rejected {handshake_rejected}; {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn boundless_availability(s: &mut Suite) {
    let p = OOB_RING.parse();
    let plain = execute(&p, &[], Limits::default(), &mut Hooks::default());
    let mut mem = BoundlessMemory::new(SafetyPolicy::default()).unwrap();
    let r = execute(&p, &[], Limits::default(), &mut Hooks { mem: Some(&mut mem), ..Default::default() });
    s.write("oob_events.jsonl", &mem.events_jsonl());
    let beyond = parse_program("const r1, 10\nalloc r2, r1\nconst r3, 5000\nconst r4, 1\nstore r2, r3, r4\nhalt").unwrap();
    let mut mem2 = BoundlessMemory::new(SafetyPolicy::default()).unwrap();
    let stop = execute(&beyond, &[], Limits::default(), &mut Hooks { mem: Some(&mut mem2), ..Default::default() });
    let pass = r.status == Status::Halted
        && r.output == [14850, 99]
        && mem.events().len() == OOB_EVENTS
        && plain.status != Status::Halted
        && stop.status == Status::Detected(DetectReason::UnsafeOob);
    s.record(
        "7 overflow tolerance",
        pass,
        format!(
            "tolerant run {:?} output {:?} with {} events (plain run {:?}); beyond horizon {:?}",
            r.status,
            r.output,
            mem.events().len(),
            plain.status,
            stop.status
        ),
    );
}

fn orchestrator_recovery(s: &mut Suite) {
    let spec = ServiceSpec {
        name: "svc".into(),
        target_instances: 1,
        mttf_mean: None,
        service_time: 0.05,
        deadline: 1.0,
        respawn_delay: 5.0,
        scale_up_queue_threshold: 50,
        max_instances: 4,
        crash_script: vec![ScriptedCrash { at: 10.0, instance: 0 }],
    };
    let r = simulate(&spec, 0.0, 100.0, SEED).unwrap();
    let again = simulate(&spec, 0.0, 100.0, SEED).unwrap();
    let loaded = ServiceSpec { mttf_mean: Some(30.0), target_instances: 2, ..spec.clone() };
    let busy = simulate(&loaded, 20.0, 100.0, SEED).unwrap().to_json();
    let reproducible = r.to_json() == again.to_json() && busy == simulate(&loaded, 20.0, 100.0, SEED).unwrap().to_json();
    s.write("sim_scripted.json", &r.to_json());
    s.write("sim_loaded.json", &busy);
    s.record(
        "8 crash recovery",
        r.availability == SIM_AVAILABILITY && r.respawns == 1 && reproducible,
        format!("availability {} respawns {}; reports reproducible {reproducible}", r.availability, r.respawns),
    );
}

fn run_suite(dir: &Path, verbose: bool) -> Vec<Verdict> {
    let mut s = Suite::new(dir.to_path_buf(), verbose);
    haft_masking(&mut s);
    overhead(&mut s, Mode::Haft, HAFT_RATIO, "2 lock-step overhead", "haft");
    code_detection(&mut s);
    overhead(&mut s, Mode::Delta, DELTA_RATIO, "4 encoded overhead", "delta");
    epc_threshold(&mut s);
    envelope_integrity(&mut s);
    boundless_availability(&mut s);
    orchestrator_recovery(&mut s);
    s.verdicts
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .expect("report dir")
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn main() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&root);
    let (first, second) = (root.join("run-1"), root.join("run-2"));

    let t = Instant::now();
    let mut verdicts = run_suite(&first, true);
    let replay = run_suite(&second, false);
    let elapsed = t.elapsed();

    let (a, b) = (files(&first), files(&second));
    let same_verdicts = verdicts.iter().zip(&replay).all(|(x, y)| x.pass == y.pass);
    let identical = !a.is_empty() && a == b;
    let pass = identical && same_verdicts && elapsed < SUITE_TIME;
    let line = format!(
        "{} report files byte-identical across two runs: {identical}; suite twice in {:.1}s (< {}s)",
        a.len(),
        elapsed.as_secs_f64(),
        SUITE_TIME.as_secs()
    );
    println!("{} 9 global determinism: {line}", if pass { "PASS" } else { "FAIL" });
    verdicts.push(Verdict { name: "9 global determinism", pass });

    let failed: Vec<&str> = verdicts.iter().filter(|v| !v.pass).map(|v| v.name).collect();
    println!("acceptance: {}/{} criteria passed; reports in {}", verdicts.len() - failed.len(), verdicts.len(), root.display());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
