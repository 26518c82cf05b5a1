mod common;

use std::fs;

use chanprune::ir::load_snapshot;
use chanprune::pipeline::{
    read_json, run_ablation, run_pipeline, InheritMode, PipelineReport, Stage, ABLATION_FILE, FINAL_BLOB,
    FINAL_MANIFEST, IMPORTANCE_FILE, INHERITED_BLOB, INHERITED_MANIFEST, INHERIT_FILE, METRICS_FILE, PLAN_FILE,
    REPORT_FILE, SPARSE_BLOB, SPARSE_MANIFEST,
};
use chanprune::planner::PruningPlan;
use chanprune::Error;

#[test]
fn half_budget_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_pipeline(dir.path());
    let report = run_pipeline(&cfg, Stage::Sparse).unwrap();
    assert!((0.49..=0.51).contains(&report.flops_ratio), "{}", report.flops_ratio);
    for f in [
        SPARSE_MANIFEST, SPARSE_BLOB, IMPORTANCE_FILE, PLAN_FILE, INHERIT_FILE, INHERITED_MANIFEST,
        INHERITED_BLOB, FINAL_MANIFEST, FINAL_BLOB, METRICS_FILE, REPORT_FILE,
    ] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let stored: PipelineReport = read_json(&dir.path().join(REPORT_FILE)).unwrap();
    assert_eq!(stored, report);
    let metrics = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().count(), 4 + 2);
    let rec: serde_json::Value = read_json(&dir.path().join(INHERIT_FILE)).unwrap();
    assert_eq!(rec["table"].as_array().unwrap().len(), 4);
}

#[test]
fn full_budget_keeps_every_channel() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_pipeline(dir.path());
    cfg.budget.target_ratio = Some(1.0);
    let report = run_pipeline(&cfg, Stage::Sparse).unwrap();
    assert_eq!(report.achieved_flops, report.baseline_flops);
    let plan: PruningPlan = read_json(&dir.path().join(PLAN_FILE)).unwrap();
    let sparse = load_snapshot(dir.path().join(SPARSE_MANIFEST), dir.path().join(SPARSE_BLOB)).unwrap();
    for (id, &c) in &plan.config.channels {
        assert_eq!(c, sparse.layers[id].out_channels);
    }
    assert!(report.final_accuracy >= report.recalibrated_accuracy - 0.01);
}

#[test]
fn zero_budget_fails_in_the_plan_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_pipeline(dir.path());
    cfg.budget.target_ratio = Some(0.0);
    match run_pipeline(&cfg, Stage::Sparse) {
        Err(Error::Stage { stage, source }) => {
            assert_eq!(stage, "plan");
            assert!(matches!(*source, Error::InvalidBudget(_)));
        }
        other => panic!("expected a plan-stage error, got {other:?}"),
    }
}

#[test]
fn new_budget_reuses_the_sparse_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_pipeline(dir.path());
    cfg.inherit = InheritMode::Fixed(chanprune::inheritance::Criterion::L1Norm);
    run_pipeline(&cfg, Stage::Sparse).unwrap();
    let blob = fs::read(dir.path().join(SPARSE_BLOB)).unwrap();
    let modified = fs::metadata(dir.path().join(SPARSE_BLOB)).unwrap().modified().unwrap();
    cfg.budget.target_ratio = Some(0.3);
    let report = run_pipeline(&cfg, Stage::Plan).unwrap();
    assert!((0.29..=0.31).contains(&report.flops_ratio) || report.nearest_achievable);
    assert_eq!(fs::read(dir.path().join(SPARSE_BLOB)).unwrap(), blob);
    assert_eq!(fs::metadata(dir.path().join(SPARSE_BLOB)).unwrap().modified().unwrap(), modified);
}

#[test]
fn resuming_without_artifacts_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_pipeline(dir.path());
    match run_pipeline(&cfg, Stage::Inherit) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "sparse"),
        other => panic!("expected a stage error, got {other:?}"),
    }
}

#[test]
fn zero_epoch_ablation_keeps_recalibrated_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_pipeline(dir.path());
    cfg.finetune.epochs = 0;
    let table = run_ablation(&cfg, Stage::Sparse).unwrap();
    assert_eq!(table.rows.len(), 4);
    for r in &table.rows {
        assert_eq!(r.final_accuracy, r.recalibrated);
    }
    assert!(dir.path().join(ABLATION_FILE).is_file());
}
