use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn amf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amf"))
        .args(args)
        .env_remove("AMF_SEED")
        .output()
        .expect("spawn amf")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_then_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = amf(&["run", "--synthetic", "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["seal.json", "audit.jsonl", "outcome.csv", "config.json", "manifest.json", "resolved_config.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let o = amf(&["verify", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let csv = out.join("outcome.csv");
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.pop();
    fs::write(&csv, lines.join("\n") + "\n").unwrap();
    let o = amf(&["verify", path(&out)]);
    assert_eq!(code(&o), 5);
}

#[test]
fn manifest_lists_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(code(&amf(&["run", "--synthetic", "--seed", "4", "--out", path(&out)])), 0);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 4);
    assert_eq!(m["subcommand"], "run");
    let arts = m["artifacts"].as_array().unwrap();
    assert!(arts.iter().any(|a| a.to_string().contains("outcome.csv")));
}

#[test]
fn usage_and_policy_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&amf(&["run", "--out", path(&tmp.path().join("x"))])), 2);
    assert_eq!(code(&amf(&["frobnicate"])), 2);
    let o = amf(&["run", "--synthetic", "--alpha", "20", "--out", path(&tmp.path().join("k"))]);
    assert_eq!(code(&o), 4);
    assert!(!tmp.path().join("k").join("seal.json").exists());

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "a,b\n1,2\n").unwrap();
    assert_eq!(code(&amf(&["run", "--data", path(&bad), "--out", path(&tmp.path().join("d"))])), 3);
    assert_eq!(code(&amf(&["run", "--data", path(&tmp.path().join("none.csv")), "--out", path(&tmp.path().join("n"))])), 1);
}

#[test]
fn refuses_nonempty_out_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(code(&amf(&["run", "--synthetic", "--out", path(&out)])), 0);
    assert_ne!(code(&amf(&["run", "--synthetic", "--out", path(&out)])), 0);
    assert_eq!(code(&amf(&["run", "--synthetic", "--force", "--out", path(&out)])), 0);
}

#[test]
fn resolved_config_reproduces_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&amf(&["run", "--synthetic", "--alpha", "12", "--seed", "9", "--out", path(&a)])), 0);
    let cfg = a.join("resolved_config.json");
    assert_eq!(code(&amf(&["--config", path(&cfg), "run", "--out", path(&b)])), 0);
    for f in ["seal.json", "outcome.csv", "audit.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn robustness_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("rb");
    let o = amf(&["robustness", "--synthetic", "--kind", "score-noise", "--replicates", "5", "--seed", "3", "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("robustness.csv")).unwrap();
    assert!(csv.lines().count() >= 2);
    let again = tmp.path().join("rb2");
    amf(&["robustness", "--synthetic", "--kind", "score-noise", "--replicates", "5", "--seed", "3", "--out", path(&again)]);
    assert_eq!(csv, fs::read_to_string(again.join("robustness.csv")).unwrap());
}

#[test]
fn report_writes_every_format() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("rep");
    let o = amf(&["report", "--synthetic", "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["results.json", "comparison.json", "report.md", "tradeoff.csv", "tradeoff.svg", "dbn_occupancy.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
}
