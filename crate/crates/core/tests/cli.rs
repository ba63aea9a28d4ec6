//! End-to-end runs of the command-line binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hardex::corpus::{CHECKSUM_XOR, OOB_RING, SUM_LOOP};

fn hardex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hardex")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn harden_prints_ratio_and_writes_canonical_program() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(dir.path(), "sum.ir", SUM_LOOP.source);
    let out = dir.path().join("sum.haft.ir");
    let o = hardex(&["harden", "--mode", "haft", "--in", s(&src), "--out", s(&out)]);
    assert!(o.status.success(), "{o:?}");
    // 9 instructions become 21: 7 doubled, 2 checks, 3 region markers, out and halt
    assert_eq!(stdout(&o), "instruction ratio: 2.333\n");
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("#! haft max_retries=3\n"));

    let r = hardex(&["run", "--in", s(&out)]);
    assert!(r.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&r)).unwrap();
    assert_eq!(v["output"], serde_json::json!([55]));
    assert_eq!(v["status"], "halted");

    let m = hardex(&["measure", "--baseline", s(&src), "--hardened", s(&out)]);
    assert!(m.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&m)).unwrap();
    let ratio = v["dyn_inst_ratio"].as_f64().unwrap();
    assert!((1.8..=2.8).contains(&ratio), "{ratio}");
}

#[test]
fn harden_failures_and_degenerate_input() {
    let dir = tempfile::tempdir().unwrap();
    let xor = write(dir.path(), "xor.ir", CHECKSUM_XOR.source);
    let out = dir.path().join("x.ir");
    let o = hardex(&["harden", "--mode", "delta", "--in", s(&xor), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unsupported instruction `xor`"));

    let empty = write(dir.path(), "empty.ir", "# nothing\n");
    let o = hardex(&["harden", "--mode", "both", "--in", s(&empty), "--out", s(&out)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "instruction ratio: 1.000\n");
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "#! delta A1=251 A2=257\n#! haft max_retries=3\n");

    let bad = write(dir.path(), "bad.ir", "frobnicate r1\n");
    let o = hardex(&["harden", "--mode", "haft", "--in", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}

#[test]
fn seeded_delta_build_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(dir.path(), "sum.ir", SUM_LOOP.source);
    let a = dir.path().join("a.ir");
    let b = dir.path().join("b.ir");
    for out in [&a, &b] {
        assert!(hardex(&["harden", "--mode", "delta", "--in", s(&src), "--out", s(out), "--seed", "9"]).status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let r = hardex(&["run", "--in", s(&a)]);
    assert!(stdout(&r).contains("\"output\":[55]"));
}

#[test]
fn unknown_flags_and_missing_seed_are_rejected() {
    assert_eq!(hardex(&["harden", "--bogus"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let src = write(dir.path(), "sum.ir", SUM_LOOP.source);
    let rep = dir.path().join("r.json");
    let o = hardex(&["inject", "--in", s(&src), "--model", "reg-bitflip", "--runs", "10", "--report", s(&rep)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--seed"));
}

#[test]
fn inject_writes_identical_reports_for_identical_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(dir.path(), "sum.ir", SUM_LOOP.source);
    let hard = dir.path().join("sum.haft.ir");
    assert!(hardex(&["harden", "--mode", "haft", "--in", s(&src), "--out", s(&hard)]).status.success());
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let rep = dir.path().join(format!("{name}.json"));
        let csv = dir.path().join(format!("{name}.csv"));
        let o = hardex(&[
            "inject", "--in", s(&src), "--hardened", s(&hard), "--model", "reg-bitflip", "--runs", "500",
            "--seed", "17", "--report", s(&rep), "--csv", s(&csv),
        ]);
        assert!(o.status.success(), "{o:?}");
        reports.push((std::fs::read(&rep).unwrap(), std::fs::read(&csv).unwrap()));
    }
    assert_eq!(reports[0], reports[1]);
    let v: serde_json::Value = serde_json::from_slice(&reports[0].0).unwrap();
    assert_eq!(v["seed"], 17);
    assert_eq!(v["params"]["runs"], 500);

    let crash = write(dir.path(), "crash.ir", "const r1, 0\ndivs r1, r1, r1\nhalt\n");
    let rep = dir.path().join("c.json");
    let o = hardex(&["inject", "--in", s(&crash), "--model", "reg-bitflip", "--runs", "5", "--seed", "1", "--report", s(&rep)]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn run_variants_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let oob = write(dir.path(), "oob.ir", OOB_RING.source);
    assert_eq!(hardex(&["run", "--in", s(&oob)]).status.code(), Some(3));
    let o = hardex(&["run", "--in", s(&oob), "--boundless"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("[14850,99]"));

    let strcopy = write(dir.path(), "s.ir", hardex::corpus::STRCOPY.source);
    let input = write(dir.path(), "in.json", "[3]");
    let o = hardex(&["run", "--in", s(&strcopy), "--input", s(&input)]);
    assert!(stdout(&o).contains("\"output\":[3,"));
    let o = hardex(&["run", "--in", s(&strcopy), "--input", "[2]"]);
    assert!(stdout(&o).contains("\"output\":[2,"));

    let cfg = write(dir.path(), "env.json", r#"{"epc_pages": 4, "fault_penalty": 10, "allowlist": ["out"]}"#);
    let o = hardex(&["run", "--in", s(&strcopy), "--input", "[3]", "--enclave", s(&cfg)]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("\"measurement\":"));
    let deny = write(dir.path(), "deny.json", r#"{"allowlist": []}"#);
    let o = hardex(&["run", "--in", s(&strcopy), "--input", "[3]", "--enclave", s(&deny)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("detected:denied-syscall"));
}

#[test]
fn simulate_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "svc.json",
        r#"{"name":"svc","target_instances":1,"mttf_mean":null,"service_time":0.05,"deadline":1.0,
            "respawn_delay":5.0,"scale_up_queue_threshold":10,"max_instances":2,
            "crash_script":[{"at":10.0,"instance":0}]}"#,
    );
    let rep = dir.path().join("r.json");
    let o = hardex(&["simulate", "--config", s(&cfg), "--seed", "3", "--duration", "100", "--rate", "0", "--report", s(&rep)]);
    assert!(o.status.success(), "{o:?}");
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&rep).unwrap()).unwrap();
    assert_eq!(v["availability"], 0.95);
    assert_eq!(v["respawns"], 1);
    let bad = write(dir.path(), "bad.json", r#"{"name":"x"}"#);
    let o = hardex(&["simulate", "--config", s(&bad), "--seed", "3", "--duration", "100", "--rate", "0", "--report", s(&rep)]);
    assert_eq!(o.status.code(), Some(2));
}
