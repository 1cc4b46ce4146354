use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flowsight"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn flowsight")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "flowsight {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

/// synth -> ingest -> build-kb in `dir`; returns (records path, store path).
fn prepared(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let records = dir.join("records.jsonl");
    let store = dir.join("kb");
    ok(&["synth", "--out-dir", p(&data)]);
    ok(&["ingest", "--conn", p(&data.join("conn.log")), "--anomalies", p(&data.join("anomalies.csv")), "--out", p(&records)]);
    ok(&["--store", p(&store), "build-kb", "--records", p(&records), "--docs", p(&data.join("docs.jsonl"))]);
    (records, store)
}

#[test]
fn bad_flags_exit_with_usage_code() {
    assert_eq!(run(&["--tau"]).status.code(), Some(2));
    assert_eq!(run(&["label", "--attack", "smurf", "--records", "x"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_one_with_message() {
    let out = run(&["ingest", "--conn", "/nonexistent/conn.log"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn syn_labels_follow_conn_state() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let records = dir.path().join("records.jsonl");
    let labels = dir.path().join("syn.jsonl");
    ok(&["synth", "--out-dir", p(&data)]);
    ok(&["ingest", "--conn", p(&data.join("conn.log")), "--out", p(&records)]);
    ok(&["label", "--records", p(&records), "--attack", "syn", "--out", p(&labels)]);

    let mut expected = BTreeMap::new();
    for r in jsonl(&records) {
        if r["proto"] != "tcp" {
            continue;
        }
        let verdict = match r["conn_state"].as_str() {
            Some("S0") => "attack",
            Some("SH" | "SF" | "RSTR" | "RSTO" | "OTH") => "benign",
            _ => continue,
        };
        expected.insert(r["record_id"].as_str().unwrap().to_string(), verdict);
    }
    let got: BTreeMap<String, String> = jsonl(&labels)
        .into_iter()
        .map(|l| (l["record_id"].as_str().unwrap().to_string(), l["verdict"].as_str().unwrap().to_string()))
        .collect();
    assert!(expected.values().any(|v| *v == "attack"));
    assert_eq!(got.len(), expected.len());
    for (id, v) in &expected {
        assert_eq!(got.get(id).map(String::as_str), Some(*v), "{id}");
    }
}

#[test]
fn eval_reproduces_known_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.jsonl");
    let preds = dir.path().join("preds.jsonl");
    let mut lf = std::fs::File::create(&labels).unwrap();
    let mut pf = std::fs::File::create(&preds).unwrap();
    // 4075 caught, 56 missed, 609 clean.
    for i in 0..4740 {
        let (verdict, decision) = match i {
            0..4075 => ("attack", "attack"),
            4075..4131 => ("attack", "no-attack"),
            _ => ("benign", "no-attack"),
        };
        let score = if decision == "attack" { 0.9 } else { 0.1 };
        writeln!(lf, r#"{{"record_id":"R{i:05}","verdict":"{verdict}","rule_fired":"fixture"}}"#).unwrap();
        writeln!(pf, r#"{{"record_id":"R{i:05}","decision":"{decision}","score":{score}}}"#).unwrap();
    }
    drop((lf, pf));
    let out_dir = dir.path().join("report");
    let stdout = ok(&["eval", "--labels", p(&labels), "--predictions", p(&preds), "--out-dir", p(&out_dir)]);
    let report: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report["matrix"]["tp"], 4075);
    assert_eq!(report["matrix"]["tn"], 609);
    assert_eq!(report["matrix"]["fp"], 0);
    assert_eq!(report["matrix"]["fn"], 56);
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((acc - 4684.0 / 4740.0).abs() < 1e-12);
    assert_eq!(report["precision"].as_f64(), Some(1.0));
    let md = std::fs::read_to_string(out_dir.join("report.md")).unwrap();
    assert!(md.contains("98.82"), "{md}");
    assert!(out_dir.join("report.json").exists());
    assert!(out_dir.join("roc.csv").exists());
}

#[test]
fn empty_store_abstains_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("empty.jsonl");
    std::fs::write(&records, "").unwrap();
    let store = dir.path().join("kb");
    ok(&["--store", p(&store), "build-kb", "--records", p(&records)]);
    let out = run(&["--store", p(&store), "query", "Is 10.0.0.1 under a SYN flood?"]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["decision"], "undecidable");
    assert_eq!(v["citations"].as_array().map(Vec::len), Some(0));
}

#[test]
fn command_line_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("empty.jsonl");
    std::fs::write(&records, "").unwrap();
    let from_file = dir.path().join("from_file");
    let cfg = dir.path().join("flowsight.toml");
    std::fs::write(&cfg, format!("store_path = {:?}\n\n[embedder]\ndim = 48\n", p(&from_file))).unwrap();

    let stats: Value = serde_json::from_str(&ok(&["--config", p(&cfg), "build-kb", "--records", p(&records)])).unwrap();
    assert_eq!(stats["dim"], 48);
    assert!(from_file.exists());

    let flagged = dir.path().join("flagged");
    let stats: Value = serde_json::from_str(&ok(&[
        "--config", p(&cfg), "--store", p(&flagged), "--dim", "24", "build-kb", "--records", p(&records),
    ]))
    .unwrap();
    assert_eq!(stats["dim"], 24);
    assert!(flagged.exists());

    std::fs::write(&cfg, "[retrieval]\ntau = 7.0\n").unwrap();
    assert_eq!(run(&["--config", p(&cfg), "build-kb", "--records", p(&records)]).status.code(), Some(1));
}

#[test]
fn end_to_end_transcript_is_reproducible() {
    let question = "Is host 203.0.113.5 sending an ICMP request flood to 10.3.0.5?";
    let mut answers = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let (_, store) = prepared(dir.path());
        answers.push(ok(&["--store", p(&store), "query", question]));
    }
    assert_eq!(answers[0], answers[1]);
    let v: Value = serde_json::from_str(&answers[0]).unwrap();
    assert_eq!(v["decision"], "attack");
    let cites = v["citations"].as_array().unwrap();
    assert!(!cites.is_empty());
    assert!(v["justification"].as_str().unwrap().contains(cites[0].as_str().unwrap()));
}

#[test]
fn repl_carries_context_and_resets() {
    let dir = tempfile::tempdir().unwrap();
    let (_, store) = prepared(dir.path());
    let mut child = bin()
        .args(["--store", p(&store), "repl"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"Is host 203.0.113.5 sending an ICMP request flood to 10.3.0.5?\n\n:reset\n:quit\nnever asked\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "verdict: attack (confidence 0.34)");
    assert!(lines.iter().any(|l| l.starts_with("  [C") && l.contains("(anomaly)")));
    assert_eq!(lines.iter().filter(|l| l.starts_with("verdict:")).count(), 1);
    assert_eq!(*lines.last().unwrap(), "context cleared");
}
