use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dapr_core::harness::{read_metrics_csv, Report};
use dapr_core::nn::ParamVector;

fn dapr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dapr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn scenario(dir: &Path) -> PathBuf {
    let path = dir.join("scenario.json");
    std::fs::write(
        &path,
        r#"{"slots": 12, "content": {"catalog_size": 30},
            "cache": {"resident_slots": 8, "candidates": 8, "top_k": 8, "capacity_mb": 80},
            "forecast": {"pretrain_slots": 20}}"#,
    )
    .unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(dir.path());
    let (a, b, c) = (dir.path().join("a.csv"), dir.path().join("b.csv"), dir.path().join("c.csv"));
    for (out, seed) in [(&a, "4"), (&b, "4"), (&c, "5")] {
        let o = dapr(&["simulate", "--config", s(&cfg), "--policy", "dapr", "--seed", seed, "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (a, b, c) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), std::fs::read(c).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn simulate_writes_side_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(dir.path());
    let p = |n: &str| dir.path().join(n);
    let o = dapr(&[
        "simulate", "--config", s(&cfg), "--policy", "dapr", "--out", s(&p("m.csv")), "--curve", s(&p("curve.csv")),
        "--heatmap", s(&p("heat.csv")), "--rounds", s(&p("rounds.jsonl")),
    ]);
    assert!(o.status.success());
    let curve = std::fs::read_to_string(p("curve.csv")).unwrap();
    assert!(curve.starts_with("episode,mean_reward,value_loss,q_loss,policy_loss\n"));
    assert_eq!(curve.lines().count(), 2);
    let heat = std::fs::read_to_string(p("heat.csv")).unwrap();
    assert!(heat.starts_with("slot,region,content,count,decay_score\n"));
    let rounds = std::fs::read_to_string(p("rounds.jsonl")).unwrap();
    // 12 slots with a 10-slot round window.
    assert_eq!(rounds.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(rounds.lines().next().unwrap()).unwrap();
    for key in ["round", "client_ids", "rho_values", "mean_local_loss", "wall_ms"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn report_matches_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(dir.path());
    let csv = dir.path().join("m.csv");
    let json = dir.path().join("r.json");
    assert!(dapr(&["simulate", "--config", s(&cfg), "--policy", "lru", "--out", s(&csv)]).status.success());
    assert!(dapr(&["report", "--in", s(&csv), "--out", s(&json)]).status.success());
    let report: Report = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let rows = read_metrics_csv(std::fs::File::open(&csv).unwrap()).unwrap();
    let summary = rows.iter().find(|r| r.region == 0 && r.kind == dapr_core::harness::RowKind::Summary).unwrap();
    assert_eq!(report.requests, summary.requests);
    assert_eq!(report.local_hits, summary.local_hits);
    assert_eq!(report.slots, 12);
    assert_eq!(report.per_region.len(), 9);
}

#[test]
fn train_predictor_checkpoint_loads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(dir.path());
    let ckpt = dir.path().join("p.bin");
    let losses = dir.path().join("l.json");
    let o = dapr(&["train-predictor", "--config", s(&cfg), "--out", s(&ckpt), "--losses", s(&losses)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let p = ParamVector::<f64>::from_bytes(&std::fs::read(&ckpt).unwrap()).unwrap();
    assert!(!p.is_empty());
    assert!(p.values().iter().all(|v| v.is_finite()));
    let epochs: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&losses).unwrap()).unwrap();
    assert!(!epochs.as_array().unwrap().is_empty());
}

#[test]
fn sweep_writes_one_summary_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(dir.path());
    let out = dir.path().join("sweep");
    let o = dapr(&[
        "sweep", "--config", s(&cfg), "--param", "cache-capacity", "--values", "40,80", "--seeds", "2", "--policy",
        "lru,random", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(summary.starts_with("param,value,policy,seed,hit_ratio,mean_delay_ms,mean_reward\n"));
    assert_eq!(summary.lines().count(), 1 + 2 * 2 * 2);
    assert!(out.join("cache_capacity_40_lru_s1.csv").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(dir.path());
    let out = dir.path().join("x.csv");
    assert_eq!(dapr(&["simulate", "--config", s(&cfg), "--policy", "nope", "--out", s(&out)]).status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"slotz": 3}"#).unwrap();
    assert_eq!(dapr(&["simulate", "--config", s(&bad), "--out", s(&out)]).status.code(), Some(2));
    std::fs::write(&bad, r#"{"cache": {"capacity_mb": -1}}"#).unwrap();
    assert_eq!(dapr(&["simulate", "--config", s(&bad), "--out", s(&out)]).status.code(), Some(2));
    let missing = dir.path().join("none.json");
    assert_eq!(dapr(&["simulate", "--config", s(&missing), "--out", s(&out)]).status.code(), Some(2));
    // Argument errors from the parser use the same code.
    assert_eq!(dapr(&["simulate", "--policy", "lru"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.csv");
    let out = dir.path().join("r.json");
    assert_eq!(dapr(&["report", "--in", s(&missing), "--out", s(&out)]).status.code(), Some(3));
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "run_id,policy,seed,episode,kind,slot,region,requests,local_hits,neighbor_hits,bs_fetches,reward,cumulative_reward,hit_ratio,mean_delay_ms,total_delay_ms\n").unwrap();
    assert_eq!(dapr(&["report", "--in", s(&empty), "--out", s(&out)]).status.code(), Some(3));
}
