//! End-to-end runs: sparse training, importance, planning, inheritance and
//! fine-tuning, with every stage's output written to disk.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::{baseline_cost, ChannelConfig};
use crate::data::{batch_order, load_cifar10, synthetic_dataset, DataSlice, Split};
use crate::engine::{evaluate_accuracy, recalibrate_bn, DEFAULT_CALIB_SIZE};
use crate::error::{Error, Result};
use crate::importance::{block_importance, importance_spread, ImportanceVector};
use crate::inheritance::{adaptive_inherit_among, inherit, Criterion, CriterionScore};
use crate::ir::{builtin_arch, load_snapshot, save_snapshot, ModelSnapshot};
use crate::planner::{bisect_alpha, Budget, BudgetTarget, PruningPlan, DEFAULT_INTERVAL, DEFAULT_MAX_ITERS, DEFAULT_TOLERANCE};
use crate::trainer::{train, EpochMetrics, TrainConfig, TrainMode};

pub const SPARSE_MANIFEST: &str = "sparse.json";
pub const SPARSE_BLOB: &str = "sparse.bin";
pub const IMPORTANCE_FILE: &str = "importance.json";
pub const PLAN_FILE: &str = "plan.json";
pub const INHERIT_FILE: &str = "inherit.json";
pub const INHERITED_MANIFEST: &str = "inherited.json";
pub const INHERITED_BLOB: &str = "inherited.bin";
pub const FINAL_MANIFEST: &str = "final.json";
pub const FINAL_BLOB: &str = "final.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const ABLATION_FILE: &str = "ablation.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sparse,
    Importance,
    Plan,
    Inherit,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Sparse, Stage::Importance, Stage::Plan, Stage::Inherit, Stage::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sparse => "sparse",
            Stage::Importance => "importance",
            Stage::Plan => "plan",
            Stage::Inherit => "inherit",
            Stage::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidConfigFile(format!("unknown stage `{s}`")))
    }
}

trait InStage<T> {
    fn in_stage(self, stage: Stage) -> Result<T>;
}

impl<T> InStage<T> for Result<T> {
    fn in_stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage: stage.name(),
            source: Box::new(e),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Builtin architecture name; ignored when `manifest` is set.
    pub arch: String,
    pub manifest: Option<PathBuf>,
    pub blob: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: "tiny_vgg".into(),
            manifest: None,
            blob: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        num_classes: usize,
        n_per_class: usize,
        shape: [usize; 3],
        noise: f32,
    },
    Cifar10 {
        dir: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Training images used for batch-norm recalibration.
    pub calib_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                num_classes: 4,
                n_per_class: 250,
                shape: [3, 16, 16],
                noise: 0.3,
            },
            calib_size: DEFAULT_CALIB_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub target_ratio: Option<f64>,
    pub target_flops: Option<u64>,
    pub tolerance: f64,
    pub interval_lo: f64,
    pub interval_hi: f64,
    pub max_iters: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            target_ratio: Some(0.5),
            target_flops: None,
            tolerance: DEFAULT_TOLERANCE,
            interval_lo: DEFAULT_INTERVAL.0,
            interval_hi: DEFAULT_INTERVAL.1,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

impl BudgetConfig {
    pub fn to_budget(&self) -> Result<Budget> {
        let target = match (self.target_ratio, self.target_flops) {
            (Some(r), None) => BudgetTarget::Ratio(r),
            (None, Some(f)) => BudgetTarget::Flops(f),
            _ => {
                return Err(Error::InvalidBudget(
                    "set exactly one of target_ratio and target_flops".into(),
                ))
            }
        };
        Ok(Budget {
            target,
            tolerance: self.tolerance,
            interval: (self.interval_lo, self.interval_hi),
            max_iters: self.max_iters,
        })
    }
}

/// `adaptive` or a single criterion name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InheritMode {
    Adaptive,
    Fixed(Criterion),
}

impl InheritMode {
    pub fn criteria(self) -> Vec<Criterion> {
        match self {
            InheritMode::Adaptive => Criterion::ALL.to_vec(),
            InheritMode::Fixed(c) => vec![c],
        }
    }
}

impl FromStr for InheritMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "adaptive" {
            return Ok(InheritMode::Adaptive);
        }
        Criterion::parse(s)
            .map(InheritMode::Fixed)
            .ok_or_else(|| Error::InvalidConfigFile(format!("unknown inheritance mode `{s}`")))
    }
}

impl Serialize for InheritMode {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            InheritMode::Adaptive => ser.serialize_str("adaptive"),
            InheritMode::Fixed(c) => ser.serialize_str(c.as_str()),
        }
    }
}

impl<'de> Deserialize<'de> for InheritMode {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn finetune_defaults() -> TrainConfig {
    TrainConfig {
        sparsity: 0.0,
        mode: TrainMode::Finetune,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds model init, data generation, shuffling and random inheritance.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub sparse: TrainConfig,
    pub budget: BudgetConfig,
    pub inherit: InheritMode,
    pub finetune: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            sparse: TrainConfig::default(),
            budget: BudgetConfig::default(),
            inherit: InheritMode::Adaptive,
            finetune: finetune_defaults(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfigFile(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfigFile(e.to_string()))
    }

    /// Sets the global seed on every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn sparse_cfg(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            mode: TrainMode::Sparse,
            ..self.sparse.clone()
        }
    }

    fn finetune_cfg(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            mode: TrainMode::Finetune,
            ..self.finetune.clone()
        }
    }
}

/// Train, validation and calibration slices.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: DataSlice,
    pub val: DataSlice,
    pub calib: DataSlice,
}

pub fn load_data(cfg: &DataConfig, seed: u64) -> Result<Datasets> {
    let (train, val) = match &cfg.source {
        DataSource::Synthetic {
            num_classes,
            n_per_class,
            shape,
            noise,
        } => {
            if !(0.0..0.5).contains(noise) {
                return Err(Error::InvalidConfigFile(format!("noise {noise} is outside [0, 0.5)")));
            }
            synthetic_dataset(*num_classes, *n_per_class, *shape, *noise, seed)
        }
        DataSource::Cifar10 { dir } => (load_cifar10(dir, Split::Train)?, load_cifar10(dir, Split::Test)?),
    };
    train.require_non_empty()?;
    let order = batch_order(train.len(), Some(seed));
    let (images, labels) = train.gather(&order[..cfg.calib_size.min(train.len())]);
    let calib = DataSlice {
        name: format!("{}-calib", train.name),
        images,
        labels,
        num_classes: train.num_classes,
        normalization: train.normalization.clone(),
    };
    Ok(Datasets { train, val, calib })
}

pub fn load_model(cfg: &ModelConfig, data: &DataSlice, seed: u64) -> Result<ModelSnapshot> {
    let s = match (&cfg.manifest, &cfg.blob) {
        (Some(m), Some(b)) => load_snapshot(m, b)?,
        (None, None) => builtin_arch(&cfg.arch, data.num_classes, data.sample_shape(), seed)?,
        _ => return Err(Error::InvalidConfigFile("model.manifest and model.blob go together".into())),
    };
    if s.input_shape != data.sample_shape() || s.num_classes != data.num_classes {
        return Err(Error::InvalidConfigFile(format!(
            "model expects {:?} with {} classes, data is {:?} with {}",
            s.input_shape,
            s.num_classes,
            data.sample_shape(),
            data.num_classes
        )));
    }
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedManifest(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    phase: &'a str,
    #[serde(flatten)]
    metrics: &'a EpochMetrics,
}

fn append_metrics(path: &Path, phase: &str, history: &[EpochMetrics]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for m in history {
        let line = serde_json::to_string(&MetricsLine { phase, metrics: m })
            .map_err(|e| Error::MalformedManifest(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InheritRecord {
    pub chosen: Criterion,
    pub table: Vec<CriterionScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub arch_name: String,
    pub seed: u64,
    pub baseline_flops: u64,
    pub achieved_flops: u64,
    pub flops_ratio: f64,
    pub baseline_params: u64,
    pub achieved_params: u64,
    pub alpha: f64,
    pub nearest_achievable: bool,
    pub importance_spread: f64,
    pub sparse_accuracy: f64,
    pub chosen_criterion: Criterion,
    pub recalibrated_accuracy: f64,
    pub final_accuracy: f64,
}

/// Sparse training (or loading the stored sparse snapshot).
fn sparse_stage(cfg: &PipelineConfig, data: &Datasets, run: bool) -> Result<ModelSnapshot> {
    let dir = &cfg.out_dir;
    if !run {
        return load_snapshot(dir.join(SPARSE_MANIFEST), dir.join(SPARSE_BLOB));
    }
    let base = load_model(&cfg.model, &data.train, cfg.seed)?;
    let (sparse, history) = train(&base, &data.train, &cfg.sparse_cfg())?;
    save_snapshot(&sparse, dir.join(SPARSE_MANIFEST), dir.join(SPARSE_BLOB))?;
    append_metrics(&dir.join(METRICS_FILE), "sparse", &history)?;
    Ok(sparse)
}

fn importance_stage(cfg: &PipelineConfig, sparse: &ModelSnapshot, run: bool) -> Result<ImportanceVector> {
    let path = cfg.out_dir.join(IMPORTANCE_FILE);
    if !run {
        return read_json(&path);
    }
    let imp = block_importance(sparse)?;
    write_json(&path, &imp)?;
    Ok(imp)
}

fn plan_stage(cfg: &PipelineConfig, sparse: &ModelSnapshot, imp: &ImportanceVector, run: bool) -> Result<PruningPlan> {
    let path = cfg.out_dir.join(PLAN_FILE);
    if !run {
        return read_json(&path);
    }
    let plan = bisect_alpha(sparse, imp, &cfg.budget.to_budget()?)?;
    write_json(&path, &plan)?;
    Ok(plan)
}

fn inherit_stage(
    cfg: &PipelineConfig,
    sparse: &ModelSnapshot,
    config: &ChannelConfig,
    data: &Datasets,
    run: bool,
) -> Result<(InheritRecord, ModelSnapshot)> {
    let dir = &cfg.out_dir;
    if !run {
        let rec: InheritRecord = read_json(&dir.join(INHERIT_FILE))?;
        let snap = load_snapshot(dir.join(INHERITED_MANIFEST), dir.join(INHERITED_BLOB))?;
        return Ok((rec, snap));
    }
    let out = adaptive_inherit_among(sparse, config, &data.calib, &data.val, cfg.seed, &cfg.inherit.criteria())?;
    let rec = InheritRecord {
        chosen: out.chosen,
        table: out.table,
    };
    write_json(&dir.join(INHERIT_FILE), &rec)?;
    save_snapshot(&out.snapshot, dir.join(INHERITED_MANIFEST), dir.join(INHERITED_BLOB))?;
    Ok((rec, out.snapshot))
}

fn finetune_stage(cfg: &PipelineConfig, inherited: &ModelSnapshot, data: &Datasets) -> Result<ModelSnapshot> {
    let dir = &cfg.out_dir;
    let (tuned, history) = train(inherited, &data.train, &cfg.finetune_cfg())?;
    save_snapshot(&tuned, dir.join(FINAL_MANIFEST), dir.join(FINAL_BLOB))?;
    append_metrics(&dir.join(METRICS_FILE), "finetune", &history)?;
    Ok(tuned)
}

/// Runs every stage from `from` on; earlier stages are read back from
/// `cfg.out_dir`. Errors carry the failing stage's name.
pub fn run_pipeline(cfg: &PipelineConfig, from: Stage) -> Result<PipelineReport> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    cfg.budget.to_budget().in_stage(Stage::Plan)?;
    cfg.sparse_cfg().validate().in_stage(Stage::Sparse)?;
    cfg.finetune_cfg().validate().in_stage(Stage::Finetune)?;
    if from == Stage::Sparse {
        let _ = fs::remove_file(cfg.out_dir.join(METRICS_FILE));
    }
    let data = load_data(&cfg.data, cfg.seed).in_stage(Stage::Sparse)?;
    let runs = |st: Stage| st >= from;

    let sparse = sparse_stage(cfg, &data, runs(Stage::Sparse)).in_stage(Stage::Sparse)?;
    let imp = importance_stage(cfg, &sparse, runs(Stage::Importance)).in_stage(Stage::Importance)?;
    let plan = plan_stage(cfg, &sparse, &imp, runs(Stage::Plan)).in_stage(Stage::Plan)?;
    let (rec, inherited) =
        inherit_stage(cfg, &sparse, &plan.config, &data, runs(Stage::Inherit)).in_stage(Stage::Inherit)?;
    let tuned = finetune_stage(cfg, &inherited, &data).in_stage(Stage::Finetune)?;

    let report = (|| -> Result<PipelineReport> {
        let base = baseline_cost(&sparse)?;
        let achieved = baseline_cost(&tuned)?;
        let recal = rec
            .table
            .iter()
            .find(|r| r.criterion == rec.chosen)
            .map_or(f64::NAN, |r| r.recalibrated_accuracy);
        Ok(PipelineReport {
            arch_name: sparse.arch_name.clone(),
            seed: cfg.seed,
            baseline_flops: base.flops,
            achieved_flops: achieved.flops,
            flops_ratio: achieved.flops as f64 / base.flops.max(1) as f64,
            baseline_params: base.params,
            achieved_params: achieved.params,
            alpha: plan.alpha,
            nearest_achievable: plan.nearest_achievable,
            importance_spread: importance_spread(&imp),
            sparse_accuracy: evaluate_accuracy(&sparse, &data.val)?,
            chosen_criterion: rec.chosen,
            recalibrated_accuracy: recal,
            final_accuracy: evaluate_accuracy(&tuned, &data.val)?,
        })
    })()
    .in_stage(Stage::Finetune)?;
    write_json(&cfg.out_dir.join(REPORT_FILE), &report).in_stage(Stage::Finetune)?;
    Ok(report)
}

/// Runs one stage, reading its inputs from `cfg.out_dir`, and returns a
/// JSON summary of what it produced.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<serde_json::Value> {
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).in_stage(stage)?;
    let data = || load_data(&cfg.data, cfg.seed).in_stage(stage);
    let sparse = || load_snapshot(dir.join(SPARSE_MANIFEST), dir.join(SPARSE_BLOB)).in_stage(stage);
    let to_json = |v: Result<serde_json::Value, serde_json::Error>| {
        v.map_err(|e| Error::MalformedManifest(e.to_string())).in_stage(stage)
    };
    match stage {
        Stage::Sparse => {
            cfg.sparse_cfg().validate().in_stage(stage)?;
            let d = data()?;
            let s = sparse_stage(cfg, &d, true).in_stage(stage)?;
            Ok(serde_json::json!({
                "manifest": dir.join(SPARSE_MANIFEST),
                "blob": dir.join(SPARSE_BLOB),
                "global_mean_abs_gamma": crate::importance::global_mean_abs_gamma(&s),
                "val_accuracy": evaluate_accuracy(&s, &d.val).in_stage(stage)?,
            }))
        }
        Stage::Importance => to_json(serde_json::to_value(importance_stage(cfg, &sparse()?, true).in_stage(stage)?)),
        Stage::Plan => {
            let s = sparse()?;
            let imp = importance_stage(cfg, &s, false).in_stage(stage)?;
            to_json(serde_json::to_value(plan_stage(cfg, &s, &imp, true).in_stage(stage)?))
        }
        Stage::Inherit => {
            let s = sparse()?;
            let plan: PruningPlan = read_json(&dir.join(PLAN_FILE)).in_stage(stage)?;
            let (rec, _) = inherit_stage(cfg, &s, &plan.config, &data()?, true).in_stage(stage)?;
            to_json(serde_json::to_value(rec))
        }
        Stage::Finetune => {
            cfg.finetune_cfg().validate().in_stage(stage)?;
            let d = data()?;
            let inherited = load_snapshot(dir.join(INHERITED_MANIFEST), dir.join(INHERITED_BLOB)).in_stage(stage)?;
            let tuned = finetune_stage(cfg, &inherited, &d).in_stage(stage)?;
            Ok(serde_json::json!({
                "manifest": dir.join(FINAL_MANIFEST),
                "blob": dir.join(FINAL_BLOB),
                "val_accuracy": evaluate_accuracy(&tuned, &d.val).in_stage(stage)?,
            }))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub criterion: Criterion,
    pub recalibrated: f64,
    #[serde(rename = "final")]
    pub final_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub plan_flops_ratio: f64,
    pub rows: Vec<AblationRow>,
    /// Spearman rank correlation between the two accuracy columns.
    pub rank_correlation: f64,
}

/// Inherits all four criteria on one plan, reporting recalibrated and
/// fine-tuned accuracy for each. Reuses a stored sparse snapshot when
/// `from` is past the sparse stage.
pub fn run_ablation(cfg: &PipelineConfig, from: Stage) -> Result<AblationTable> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    cfg.budget.to_budget().in_stage(Stage::Plan)?;
    let data = load_data(&cfg.data, cfg.seed).in_stage(Stage::Sparse)?;
    let sparse = sparse_stage(cfg, &data, from <= Stage::Sparse).in_stage(Stage::Sparse)?;
    let imp = importance_stage(cfg, &sparse, from <= Stage::Importance).in_stage(Stage::Importance)?;
    let plan = plan_stage(cfg, &sparse, &imp, from <= Stage::Plan).in_stage(Stage::Plan)?;
    let mut rows = Vec::with_capacity(Criterion::ALL.len());
    for crit in Criterion::ALL {
        let row = (|| -> Result<AblationRow> {
            let pruned = recalibrate_bn(&inherit(&sparse, &plan.config, crit, cfg.seed)?, &data.calib)?;
            let recalibrated = evaluate_accuracy(&pruned, &data.val)?;
            let (tuned, _) = train(&pruned, &data.train, &cfg.finetune_cfg())?;
            Ok(AblationRow {
                criterion: crit,
                recalibrated,
                final_accuracy: evaluate_accuracy(&tuned, &data.val)?,
            })
        })()
        .in_stage(Stage::Inherit)?;
        rows.push(row);
    }
    let re: Vec<f64> = rows.iter().map(|r| r.recalibrated).collect();
    let fi: Vec<f64> = rows.iter().map(|r| r.final_accuracy).collect();
    let table = AblationTable {
        plan_flops_ratio: plan.achieved_ratio(),
        rows,
        rank_correlation: spearman(&re, &fi),
    };
    write_json(&cfg.out_dir.join(ABLATION_FILE), &table).in_stage(Stage::Inherit)?;
    Ok(table)
}

/// Average ranks, 1-based; ties share the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman correlation (Pearson on average ranks). Zero when either side
/// has no spread.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn defaults_follow_the_cifar_recipe() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.sparse.epochs, 150);
        assert_eq!(cfg.sparse.batch_size, 256);
        assert_eq!(cfg.sparse.momentum, 0.9);
        assert_eq!(cfg.sparse.weight_decay, 5e-3);
        assert_eq!(cfg.sparse.sparsity, 1e-4);
        assert_eq!(cfg.finetune.sparsity, 0.0);
        assert_eq!(cfg.budget.interval_lo, 0.01);
        assert_eq!(cfg.budget.interval_hi, 100.0);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = PipelineConfig::from_toml(
            r#"
            seed = 7
            inherit = "gm"
            [budget]
            target_ratio = 0.3
            [sparse]
            epochs = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.inherit, InheritMode::Fixed(Criterion::GeometricMedian));
        assert_eq!(cfg.sparse.epochs, 2);
        assert_eq!(cfg.sparse.batch_size, 256);
        assert_eq!(cfg.budget.target_ratio, Some(0.3));
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(ranks(&[0.5, 0.1, 0.5]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn stage_names_parse() {
        for st in Stage::ALL {
            assert_eq!(st.name().parse::<Stage>().unwrap(), st);
        }
        assert!("nope".parse::<Stage>().is_err());
    }
}
