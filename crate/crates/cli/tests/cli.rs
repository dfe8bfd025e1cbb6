use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONF: &str = "seed = 2\nn_retain = 120\nn_forget = 30\nn_test = 60\n";

fn sbu(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbu"))
        .current_dir(dir)
        .args(["--config", "sbu.conf", "--store", "store"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Vec<Value> {
    let out = sbu(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn populated() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sbu.conf"), CONF).unwrap();
    ok(dir.path(), &["gen-corpus", "--out", "corpus.jsonl"]);
    ok(dir.path(), &["store", "--corpus", "corpus.jsonl", "--request-out", "request.json"]);
    dir
}

#[test]
fn audit_verify_clean_and_tampered() {
    let dir = populated();
    let recs = ok(dir.path(), &["audit-verify"]);
    assert_eq!(recs[0]["ok"], true);

    let log = dir.path().join("store/audit.log");
    let mut bytes = std::fs::read(&log).unwrap();
    let second = bytes.iter().position(|b| *b == b'\n').unwrap() + 1;
    let pos = second + 40;
    bytes[pos] ^= 0x01;
    std::fs::write(&log, &bytes).unwrap();
    let out = sbu(dir.path(), &["audit-verify"]);
    assert_eq!(out.status.code(), Some(1));
    let rec: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rec["first_bad_index"], 1);
}

#[test]
fn unlearn_then_probe_reports_no_exposure() {
    let dir = populated();
    ok(dir.path(), &["train", "--corpus", "corpus.jsonl"]);
    let report = ok(dir.path(), &["unlearn", "--request", "request.json"]);
    assert_eq!(report[0]["record"], "unlearn");
    assert!(report[0]["training"]["steps"].as_u64().unwrap() > 0);
    let req: Value = serde_json::from_slice(&std::fs::read(dir.path().join("request.json")).unwrap()).unwrap();
    for t in req["targets"].as_array().unwrap() {
        let probe = ok(dir.path(), &["probe", "--id", &t.to_string(), "--corpus", "corpus.jsonl"]);
        assert_eq!(probe[0]["outcome"]["reexposed"], false, "target {t}");
    }
    assert_eq!(ok(dir.path(), &["audit-verify"])[0]["ok"], true);
}

#[test]
fn query_skips_a_blocked_top_hit() {
    let dir = populated();
    let corpus = std::fs::read_to_string(dir.path().join("corpus.jsonl")).unwrap();
    let item: Value = serde_json::from_str(corpus.lines().next().unwrap()).unwrap();
    let e = item["entities"].as_array().unwrap();
    let text = format!("{} {}", e[0].as_str().unwrap(), e[1].as_str().unwrap());
    let entity = e[0].as_str().unwrap();
    let hits = ok(dir.path(), &["query", "--text", &text]);
    let episodic = hits.iter().find(|h| h["layer"] == "episodic").unwrap()["id"].as_u64().unwrap();
    assert!(hits[0]["content"].as_str().unwrap().contains(entity));

    std::fs::write(dir.path().join("one.json"), format!("{{\"request_id\": \"one\", \"targets\": [{episodic}]}}"))
        .unwrap();
    ok(dir.path(), &["unlearn", "--memory-only", "--request", "one.json"]);
    let after = ok(dir.path(), &["query", "--text", &text]);
    // the record and everything derived from it are gone; the rest keeps its order
    assert!(after.iter().all(|h| !h["content"].as_str().unwrap().contains(entity)));
    let survivors: Vec<&Value> =
        hits.iter().filter(|h| !h["content"].as_str().unwrap().contains(entity)).map(|h| &h["id"]).collect();
    let kept: Vec<&Value> = after.iter().map(|h| &h["id"]).filter(|id| survivors.contains(id)).collect();
    assert_eq!(kept, survivors);
    assert_eq!(&after[0]["id"], survivors[0]);
}

#[test]
fn errors_exit_nonzero() {
    let dir = populated();
    let p = dir.path();

    let out = sbu(p, &["--set", "lamda_f=1", "audit-verify"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda_f"));

    let out = sbu(p, &["--store", "missing", "query", "--text", "x"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(p.join("bad.json"), "{\"targets\": \"nope\"}").unwrap();
    let out = sbu(p, &["unlearn", "--request", "bad.json", "--memory-only"]);
    assert_eq!(out.status.code(), Some(2));

    // parameter unlearning without a trained model
    let out = sbu(p, &["unlearn", "--request", "request.json"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(p.join("store/store.lock"), "1\n").unwrap();
    let out = sbu(p, &["query", "--text", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lock"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn store_refuses_to_populate_twice() {
    let dir = populated();
    let out = sbu(dir.path(), &["store", "--corpus", "corpus.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn metrics_file_mirrors_stdout() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sbu.conf"), CONF).unwrap();
    let out = sbu(dir.path(), &["run-loop", "--items", "2", "--metrics-out", "loop.jsonl"]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(dir.path().join("loop.jsonl")).unwrap(), out.stdout);
    let stages: Vec<Value> =
        String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(stages.len(), 6);
    assert_eq!(stages[3]["forget_hit_rate"], 0.0);
}
