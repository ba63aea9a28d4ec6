//! Corpus outputs against plain-Rust reimplementations of each workload, and
//! transparency of every hardening mode on top of them.

use hardex::boundless::BoundlessMemory;
use hardex::corpus::{self, CorpusProgram};
use hardex::delta::{transform_delta, EncodingParams};
use hardex::enclave::{EnclaveEnvelope, EnvelopeConfig};
use hardex::haft::{transform_haft, HaftConfig};
use hardex::ir::{execute, Hooks, IRProgram, Limits, Status, Word};

fn sum_loop() -> Vec<Word> {
    vec![(1..=10).sum()]
}

fn matmul8() -> Vec<Word> {
    let a: Vec<Word> = (0..64).collect();
    let b: Vec<Word> = (0..64).map(|x| 64 - x).collect();
    let mut c = [0 as Word; 64];
    for i in 0..8 {
        for j in 0..8 {
            c[i * 8 + j] = (0..8).map(|k| a[i * 8 + k] * b[k * 8 + j]).sum();
        }
    }
    vec![c.iter().sum(), c[63]]
}

fn strcopy(n: Word) -> Vec<Word> {
    let s: Vec<Word> = (0..n).map(|i| 65 + i).collect();
    let copy = s.clone();
    let checksum = copy.iter().enumerate().map(|(p, c)| c * (p as Word + 1)).sum();
    vec![copy.len() as Word, checksum]
}

fn fsm(mut x: Word, steps: Word) -> Vec<Word> {
    let (mut state, mut hits) = (0, 0);
    for _ in 0..steps.max(1) {
        x = (7 * x + 3) % 10;
        state = match state {
            0 => if x < 5 { 1 } else { 2 },
            1 if x == 3 => {
                hits += 1;
                0
            }
            1 => 2,
            _ => if x < 2 { 0 } else { 1 },
        };
    }
    vec![hits, state]
}

fn kvlookup() -> Vec<Word> {
    let table: Vec<(Word, Word)> = (0..16).map(|i| (7 * i + 3, i * i + 1)).collect();
    let (mut found, mut misses) = (0, 0);
    for j in 0..20 {
        match table.iter().find(|(k, _)| *k == 5 * j + 3) {
            Some((_, v)) => found += v,
            None => misses += 1,
        }
    }
    vec![found, misses]
}

fn oob_ring() -> Vec<Word> {
    vec![(0..100).map(|i| 3 * i).sum(), 99]
}

fn page_sweep(pages: Word, stride: Word, sweeps: Word) -> Vec<Word> {
    let words = pages * 512;
    let touches = (words + stride - 1) / stride;
    // sweep s reads the value s - 1 stored by the previous sweep
    let per_sweep: Word = (1..sweeps).map(|s| s - 1).sum();
    vec![touches * per_sweep]
}

fn checksum_xor(a: Word, b: Word) -> Vec<Word> {
    vec![(a ^ b) << a]
}

fn run(p: &IRProgram, input: &[Word]) -> (Status, Vec<Word>) {
    let r = execute(p, input, Limits::default(), &mut Hooks::default());
    (r.status, r.output)
}

fn expected(c: &CorpusProgram) -> Vec<Word> {
    let i = c.input;
    match c.name {
        "sum_loop" => sum_loop(),
        "matmul8" => matmul8(),
        "strcopy" => strcopy(i[0]),
        "fsm" => fsm(i[0], i[1]),
        "kvlookup" => kvlookup(),
        "page_sweep" => page_sweep(i[0], i[1], i[2]),
        "checksum_xor" => checksum_xor(i[0], i[1]),
        other => panic!("no oracle for {other}"),
    }
}

#[test]
fn frozen_oracle_values() {
    assert_eq!(sum_loop(), vec![55]);
    assert_eq!(matmul8(), vec![502656, 13468]);
    assert_eq!(strcopy(12), vec![12, 5642]);
    assert_eq!(fsm(4, 40), vec![5, 1]);
    assert_eq!(kvlookup(), vec![128, 17]);
    assert_eq!(oob_ring(), vec![14850, 99]);
    assert_eq!(checksum_xor(3, 5), vec![48]);
}

#[test]
fn corpus_matches_oracles() {
    for c in corpus::WORKLOADS.iter().chain([corpus::PAGE_SWEEP, corpus::CHECKSUM_XOR].iter()) {
        assert_eq!(run(&c.parse(), c.input), (Status::Halted, expected(c)), "{}", c.name);
    }
}

#[test]
fn parameterised_corpus_matches_oracles() {
    let ss = corpus::STRCOPY.parse();
    let fs = corpus::FSM.parse();
    let ps = corpus::PAGE_SWEEP.parse();
    for n in [0, 1, 5, 30] {
        assert_eq!(run(&ss, &[n]).1, strcopy(n), "strcopy {n}");
    }
    for x in 0..10 {
        for steps in [1, 7, 25] {
            assert_eq!(run(&fs, &[x, steps]).1, fsm(x, steps), "fsm {x} {steps}");
        }
    }
    for (pages, stride, sweeps) in [(1, 1, 1), (2, 3, 4), (3, 512, 5), (1, 700, 3)] {
        assert_eq!(run(&ps, &[pages, stride, sweeps]).1, page_sweep(pages, stride, sweeps));
    }
}

#[test]
fn oob_ring_needs_tolerant_memory() {
    let p = corpus::OOB_RING.parse();
    let (status, _) = run(&p, &[]);
    assert_eq!(status, Status::Crashed(hardex::ir::Trap::OutOfBounds));
    let mut mem = BoundlessMemory::default();
    let r = execute(&p, &[], Limits::default(), &mut Hooks { mem: Some(&mut mem), ..Default::default() });
    assert_eq!((r.status, r.output), (Status::Halted, oob_ring()));
}

#[test]
fn every_hardening_is_transparent() {
    let haft_cfgs = [
        HaftConfig::default(),
        HaftConfig { region_blocks: 3, max_retries: 1 },
        HaftConfig { region_blocks: 8, max_retries: 5 },
    ];
    for c in corpus::WORKLOADS.iter().chain([corpus::PAGE_SWEEP].iter()) {
        let p = c.parse();
        let want = (Status::Halted, expected(c));
        for cfg in &haft_cfgs {
            assert_eq!(run(&transform_haft(&p, cfg).unwrap(), c.input), want, "haft {} {cfg:?}", c.name);
        }
        for seed in [None, Some(1), Some(2), Some(99)] {
            let params = match seed {
                Some(s) => EncodingParams::default().draw(s).unwrap(),
                None => EncodingParams::default(),
            };
            let d = transform_delta(&p, &params).unwrap();
            assert_eq!(run(&d, c.input), want, "delta {} {seed:?}", c.name);
        }
        let both = hardex::cli::cmd_harden(&p, hardex::cli::Mode::Both, Some(5), &HaftConfig::default()).unwrap();
        assert_eq!(run(&both, c.input), want, "both {}", c.name);
    }
}

#[test]
fn envelope_and_tolerant_memory_are_transparent() {
    for c in corpus::WORKLOADS {
        let want = (Status::Halted, expected(&c));
        let mut env = EnclaveEnvelope::new(c.parse(), [3; 32], &EnvelopeConfig::default(), 0);
        let r = env.execute(c.input, Limits::default());
        assert_eq!((r.status, r.output), want, "enclave {}", c.name);
        let mut mem = BoundlessMemory::default();
        let r = execute(&c.parse(), c.input, Limits::default(), &mut Hooks { mem: Some(&mut mem), ..Default::default() });
        assert_eq!((r.status, r.output), want, "boundless {}", c.name);
        assert!(mem.events().is_empty());
    }
}
