use std::path::Path;
use std::process::{Command, Output};

fn argus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_argus")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = argus(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "out_dir": dir.join("run"),
        "data": {"events": dir.join("events.jsonl"), "header": dir.join("header.json"), "holdout_days": 4},
        "world": {"n_users": 30, "n_items": 100, "n_days": 10},
        "model": {"encoder": {"n_layers": 1, "width": 16, "n_heads": 2, "max_len": 32},
                  "embedding": {"table_rows": 512, "dim": 8}},
        "sampling": {"n_uniform": 8, "n_inbatch": 8, "eval_uniform": 16, "eval_inbatch": 16, "sketch_width": 256},
        "loss": {"latency": 3600},
        "train": {"batch_size": 4, "finetune_batch_size": 4, "pretrain_len": 16, "finetune_len": 32}
    });
    let path = dir.join("run.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    let common = ["--config", &cfg, "--seed", "3", "--deterministic", "--out-dir", o];
    let with = |cmd: &str, extra: &[&str]| -> String {
        let mut a = vec![cmd];
        a.extend(common);
        a.extend(extra);
        ok(&a)
    };
    assert!(with("generate", &[]).contains("events"));
    let pre = with("pretrain", &[]);
    assert!(pre.trim().ends_with("pretrain.ckpt"));
    let fine = with("finetune", &["--init", pre.trim()]);
    let table = with("evaluate", &["--ckpt", fine.trim()]);
    assert!(table.contains("PA popularity"));
    for f in ["config.json", "pretrain_log.jsonl", "finetune_log.jsonl", "metrics.json", "metrics.txt", "scores.tsv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 3);
    assert_eq!(echoed["world"]["seed"], 3);
    assert_eq!(echoed["deterministic"], true);
    assert_eq!(echoed["out_dir"], o);
    // defaults are filled in for omitted fields
    assert_eq!(echoed["train"]["adam"]["clip_norm"], 1.0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let scores = std::fs::read_to_string(out.join("scores.tsv")).unwrap();
    assert_eq!(scores.lines().count() as u64, report["n_impressions"].as_u64().unwrap());
    // from-scratch fine-tune also runs
    ok(&["finetune", "--config", &cfg, "--out-dir", dir.path().join("scratch").to_str().unwrap()]);
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"batch_sise": 8}}"#).unwrap();
    let out = argus(&["generate", "--config", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_sise"));

    let cfg = tiny_config(dir.path());
    let missing = dir.path().join("nope.ckpt");
    let out = argus(&["evaluate", "--config", &cfg, "--ckpt", missing.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(!argus(&["evaluate", "--config", &cfg]).status.success());
}
