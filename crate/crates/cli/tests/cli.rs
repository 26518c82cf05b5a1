use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
seed = 1

[data]
calib_size = 128

[data.source]
kind = "synthetic"
num_classes = 4
n_per_class = 60
shape = [3, 16, 16]
noise = 0.3

[sparse]
epochs = 2
batch_size = 32
weight_decay = 0.0
lr = { kind = "cosine", initial = 0.05 }

[finetune]
epochs = 1
batch_size = 32
sparsity = 0.0
mode = "finetune"
lr = { kind = "cosine", initial = 0.05 }

[budget]
target_ratio = 0.5
"#;

fn chanprune(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("tiny.toml");
    if !config.exists() {
        std::fs::write(&config, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_chanprune"))
        .arg("--config")
        .arg(&config)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn pipeline_then_plan_report_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let report = json(&chanprune(dir.path(), &["pipeline"]));
    let ratio = report["flops_ratio"].as_f64().unwrap();
    if report["nearest_achievable"] == Value::Bool(true) {
        assert!(ratio <= 0.5, "ratio {ratio}");
    } else {
        assert!((0.495..=0.505).contains(&ratio), "ratio {ratio}");
    }
    for f in ["sparse.json", "sparse.bin", "plan.json", "final.json", "final.bin"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }

    let plan = json(&chanprune(dir.path(), &["plan", "--target-flops-ratio", "0.3"]));
    assert!(plan["achieved"]["flops"].as_u64().unwrap() <= plan["baseline_flops"].as_u64().unwrap() * 31 / 100);

    let full = json(&chanprune(dir.path(), &["report"]));
    assert_eq!(full["flops"], report["baseline_flops"]);
    let plan_path = dir.path().join("out/plan.json");
    let pruned = json(&chanprune(dir.path(), &["report", "--plan", plan_path.to_str().unwrap()]));
    assert!(pruned["flops"].as_u64() < full["flops"].as_u64());

    let manifest = dir.path().join("out/final.json");
    let eval = json(&chanprune(dir.path(), &["eval", "--manifest", manifest.to_str().unwrap()]));
    let acc = eval["val_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn invalid_budget_names_the_plan_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = chanprune(dir.path(), &["sparse-train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = chanprune(dir.path(), &["plan", "--target-flops-ratio", "0"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage `plan`"), "{err}");
}

#[test]
fn unknown_stage_and_criterion_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!chanprune(dir.path(), &["--from-stage", "bogus", "pipeline"]).status.success());
    assert!(!chanprune(dir.path(), &["inherit", "--criterion", "bogus"]).status.success());
}
