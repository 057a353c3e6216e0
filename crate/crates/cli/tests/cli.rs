use fraudgraph_core::explainer::{parse_dot_edges, Explanation};
use fraudgraph_core::hetgraph::HeteroGraph;
use fraudgraph_core::predictor::RiskScore;
use fraudgraph_core::sampler::{chronological_split, DEFAULT_RATIOS};
use std::path::Path;
use std::process::{Command, Output};

fn fraudgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fraudgraph")).args(args).env_remove("GRAPH").env_remove("CHECKPOINT").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = fraudgraph(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a.csv"), dir.path().join("b.csv"), dir.path().join("c.csv"));
    ok(&["gen", "--n-txn", "1000", "--seed", "7", "-o", s(&a)]);
    ok(&["gen", "--n-txn", "1000", "--seed", "7", "-o", s(&b)]);
    ok(&["gen", "--n-txn", "1000", "--seed", "8", "-o", s(&c)]);
    let (a, b, c) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), std::fs::read(c).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1001);
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let out = fraudgraph(&["gen", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(fraudgraph(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn failures_exit_nonzero_with_message() {
    let out = fraudgraph(&["ingest", "-i", "/nonexistent/log.csv", "-o", "/tmp/never.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn train_score_and_explain_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.csv");
    let graph = dir.path().join("graph.jsonl");
    let ckpt = dir.path().join("model.ckpt");
    let truth = dir.path().join("truth.json");
    ok(&["gen", "--n-txn", "1500", "--seed", "3", "-o", s(&log), "--truth", s(&truth)]);
    assert!(truth.exists());
    ok(&["ingest", "-i", s(&log), "-o", s(&graph), "--seed", "3"]);
    let report = dir.path().join("report.json");
    ok(&["train", "--graph", s(&graph), "-o", s(&ckpt), "--epochs", "3", "--seed", "1", "--report", s(&report)]);
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(rep["epochs"].as_array().unwrap().len(), 3);

    let g = HeteroGraph::read_jsonl(std::io::BufReader::new(std::fs::File::open(&graph).unwrap())).unwrap();
    let held_out = g.node(chronological_split(&g, DEFAULT_RATIOS).unwrap().test[0]).name.clone();
    let out = ok(&["score", "--graph", s(&graph), "--checkpoint", s(&ckpt), "--txn", &held_out, "--seed", "0"]);
    let scores: Vec<RiskScore> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(scores.len(), 1);
    assert_eq!(scores[0].txn_id, held_out);
    assert!((0.0..=1.0).contains(&scores[0].fraud_probability));
    let all = ok(&["score", "--graph", s(&graph), "--checkpoint", s(&ckpt), "--part", "test"]);
    assert_eq!(all.lines().count(), chronological_split(&g, DEFAULT_RATIOS).unwrap().test.len());
    // Scoring straight from the log gives the same numbers.
    let from_log = ok(&["score", "--graph", s(&log), "--checkpoint", s(&ckpt), "--txn", &held_out]);
    assert_eq!(from_log, out);

    let explain = |threshold: &str, format: &str| {
        ok(&["explain", "--graph", s(&graph), "--checkpoint", s(&ckpt), "--txn", &held_out, "--threshold", threshold, "--format", format])
    };
    let e: Explanation = serde_json::from_str(&explain("0.15", "json")).unwrap();
    assert_eq!(e.v, 1);
    assert_eq!(e.target, held_out);
    assert_eq!(e.threshold, 0.15);
    assert!(e.edges.iter().all(|x| x.weight >= 0.15));
    let all_edges: Explanation = serde_json::from_str(&explain("0", "json")).unwrap();
    assert_eq!(all_edges.edges.iter().filter(|x| x.weight >= 0.15).count(), e.edges.len());
    let none: Explanation = serde_json::from_str(&explain("1", "json")).unwrap();
    assert!(none.edges.is_empty());
    let dot = explain("0.15", "dot");
    let parsed = parse_dot_edges(&dot).unwrap();
    assert_eq!(parsed.len(), e.edges.len());
    assert!(parsed.iter().zip(&e.edges).all(|(p, x)| p.0 == x.src && p.1 == x.dst && p.2 == x.weight));
    assert_eq!(explain("0.15", "json"), explain("0.15", "json"));
    let bad = fraudgraph(&["explain", "--graph", s(&graph), "--checkpoint", s(&ckpt), "--txn", "NOPE"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn bench_runs_a_small_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("bench.json");
    let table = ok(&["bench", "--n-txn", "1500", "--seed", "2", "--models", "lr,dnn", "--runs", "2", "--epochs", "3", "--json", s(&json)]);
    assert!(table.contains("lr") && table.contains("dnn"));
    let reports: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r["aucs"].as_array().unwrap().len() == 2));
    assert_eq!(fraudgraph(&["bench", "--models", "svm"]).status.code(), Some(1));
}
