use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn compexp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compexp")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = compexp(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    compexp(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) -> std::path::PathBuf {
    let c = dir.join("c");
    ok(&["synth", "--out", s(&c), "--units", "3000", "--primitives", "10", "--neurons", "5", "--seed", "2"]);
    c
}

#[test]
fn synth_validate_explain_stats() {
    let dir = tempfile::tempdir().unwrap();
    let c = synth(dir.path());
    let summary: Value = serde_json::from_str(&ok(&["validate", s(&c)])).unwrap();
    assert_eq!(summary["concepts"], 10);
    assert_eq!(summary["neurons"], 5);
    assert_eq!(summary["units"], 3000);

    let r = dir.path().join("r");
    ok(&["explain", s(&c), "--max-length", "3", "--out", s(&r)]);
    let report: Value = serde_json::from_slice(&std::fs::read(r.join("report.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    let manifest: Value = serde_json::from_slice(&std::fs::read(c.join("manifest.json")).unwrap()).unwrap();
    let planted = manifest["metadata"]["planted"].as_array().unwrap();
    for row in rows {
        let curve: Vec<f64> = row["curve"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(curve.len(), 3);
        assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(curve[2], row["iou"].as_f64().unwrap());
    }
    assert_eq!(planted.len(), 5);

    let stats: Value = serde_json::from_str(&ok(&["stats", s(&r.join("report.json")), "--by-length"])).unwrap();
    assert_eq!(stats["best"]["neurons"], 5);
    assert_eq!(stats["by_length"].as_array().unwrap().len(), 3);

    let csv = std::fs::read_to_string(r.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(std::fs::read_to_string(r.join("summary.html")).unwrap().contains("mean-iou-per-length"));
}

#[test]
fn netdissect_is_length_one() {
    let dir = tempfile::tempdir().unwrap();
    let c = synth(dir.path());
    let r = dir.path().join("nd");
    ok(&["netdissect", s(&c), "--out", s(&r), "--format", "json"]);
    let report: Value = serde_json::from_slice(&std::fs::read(r.join("report.json")).unwrap()).unwrap();
    for row in report["rows"].as_array().unwrap() {
        assert_eq!(row["curve"].as_array().unwrap().len(), 1);
        assert!(!row["formula"].as_str().unwrap().contains(' '));
    }
    assert!(!r.join("report.csv").exists());
}

#[test]
fn oracle_agrees_on_synthetic_container() {
    let dir = tempfile::tempdir().unwrap();
    let c = synth(dir.path());
    let out = ok(&["oracle", s(&c), "--max-length", "2"]);
    let lines: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    assert!(lines.iter().all(|l| l["agree"] == true));
}

#[test]
fn exit_codes_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let c = synth(dir.path());
    let out = dir.path().join("out");
    assert_eq!(code(&["explain", s(&c), "--jobs", "0", "--out", s(&out)]), 14);
    assert_eq!(code(&["explain", s(&c), "--operators", "and,xor", "--out", s(&out)]), 2);
    assert_eq!(code(&["validate", s(&dir.path().join("missing"))]), 30);
    assert_eq!(code(&["contrib", s(&c), "--class", "0"]), 12);

    ok(&["explain", s(&c), "--max-length", "2", "--out", s(&out)]);
    assert_eq!(code(&["correlate", s(&out.join("report.json"))]), 12);

    let blob = c.join("activations.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    let res = compexp(&["validate", s(&c)]);
    assert_eq!(res.status.code(), Some(22));
    assert!(String::from_utf8_lossy(&res.stderr).contains("activations"));
}

#[test]
fn synth_rejects_contradictory_spec() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c");
    assert_eq!(code(&["synth", "--out", s(&c), "--primitives", "2", "--planted-length", "3"]), 14);
}

#[test]
fn min_activations_filters_dead_neurons() {
    let dir = tempfile::tempdir().unwrap();
    let c = synth(dir.path());
    let r = dir.path().join("r");
    assert_eq!(code(&["explain", s(&c), "--min-activations", "100000", "--out", s(&r)]), 15);
    ok(&["explain", s(&c), "--min-activations", "0", "--neurons", "1,3", "--max-length", "1", "--out", s(&r)]);
    let report: Value = serde_json::from_slice(&std::fs::read(r.join("report.json")).unwrap()).unwrap();
    let ids: Vec<u64> = report["rows"].as_array().unwrap().iter().map(|r| r["neuron"].as_u64().unwrap()).collect();
    assert_eq!(ids, [1, 3]);
}
