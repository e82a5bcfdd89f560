//! End-to-end pipeline checks at the smoke scale.

use std::time::Instant;

use hypercast_core::config::smoke_config;
use hypercast_core::experiments::run_pipeline;

#[test]
fn smoke_pipeline_runs_and_is_deterministic() {
    let cfg = smoke_config();
    let base = std::env::temp_dir().join(format!("hypercast-smoke-{}", std::process::id()));
    let out_a = base.join("a");
    let out_b = base.join("b");
    std::fs::create_dir_all(&out_a).unwrap();
    std::fs::create_dir_all(&out_b).unwrap();

    let start = Instant::now();
    let summary = run_pipeline(&cfg, &out_a).unwrap();
    let first = start.elapsed();
    println!("smoke run: {first:?}, events {}", summary.events_total);
    assert!(summary.events_total > 0);
    assert_eq!(summary.reports.len(), 3);

    for rel in [
        "reports/transfer.jsonl",
        "reports/ablation.jsonl",
        "reports/generalization.jsonl",
        "logs/events.jsonl",
        "logs/embeddings.jsonl",
        "run.json",
    ] {
        let p = out_a.join(rel);
        assert!(p.exists(), "{rel} missing");
        assert!(std::fs::metadata(&p).unwrap().len() > 0, "{rel} empty");
    }
    assert!(!summary.checkpoints.is_empty());
    for rel in &summary.checkpoints {
        assert!(out_a.join(rel).exists(), "{rel} missing");
    }

    run_pipeline(&cfg, &out_b).unwrap();
    for rel in [
        "reports/transfer.jsonl",
        "reports/ablation.jsonl",
        "reports/generalization.jsonl",
        "logs/events.jsonl",
        "logs/embeddings.jsonl",
    ] {
        let a = std::fs::read(out_a.join(rel)).unwrap();
        let b = std::fs::read(out_b.join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between identical runs");
    }

    std::fs::remove_dir_all(&base).ok();
}
