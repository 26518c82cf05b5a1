use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use chanprune::cost::evaluate_cost;
use chanprune::engine::evaluate_accuracy;
use chanprune::ir::{load_snapshot, ModelSnapshot};
use chanprune::pipeline::{
    load_data, read_json, run_ablation, run_pipeline, run_stage, InheritMode, PipelineConfig, Stage,
    SPARSE_BLOB, SPARSE_MANIFEST,
};
use chanprune::planner::PruningPlan;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "chanprune", version, about = "Budgeted channel pruning for small CNNs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// First stage to run; earlier ones are read from the output directory.
    #[arg(long, global = true, default_value = "sparse")]
    from_stage: String,
}

#[derive(Args)]
struct SnapshotArgs {
    /// Manifest path (defaults to the sparse snapshot in the output directory).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    blob: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train with the L1 penalty on prunable batch-norm scales.
    SparseTrain,
    /// Print per-block mean |gamma| and importance.
    Importance,
    /// Search the proportionality factor for a FLOPs budget.
    Plan {
        #[arg(long)]
        target_flops_ratio: Option<f64>,
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        interval_lo: Option<f64>,
        #[arg(long)]
        interval_hi: Option<f64>,
    },
    /// Build the pruned network by one criterion, or pick the best (`adaptive`).
    Inherit {
        /// l1 | bn | gm | random | adaptive
        #[arg(long)]
        criterion: Option<String>,
    },
    /// Fine-tune the inherited network.
    Finetune,
    /// Validation accuracy of a snapshot.
    Eval {
        #[command(flatten)]
        snap: SnapshotArgs,
    },
    /// FLOPs and parameter counts of a snapshot, optionally under a plan.
    Report {
        #[command(flatten)]
        snap: SnapshotArgs,
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Run every stage end to end.
    Pipeline,
    /// Compare all inheritance criteria on one plan.
    Ablation,
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(dir) = &c.out_dir {
        cfg.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn snapshot_from(args: &SnapshotArgs, out_dir: &Path) -> Result<ModelSnapshot> {
    let (manifest, blob) = match &args.manifest {
        Some(m) => (m.clone(), args.blob.clone().unwrap_or_else(|| m.with_extension("bin"))),
        None => (out_dir.join(SPARSE_MANIFEST), out_dir.join(SPARSE_BLOB)),
    };
    load_snapshot(&manifest, &blob).with_context(|| format!("loading {}", manifest.display()))
}

fn print(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let from: Stage = cli.common.from_stage.parse()?;
    match cli.cmd {
        Cmd::SparseTrain => print(&run_stage(&cfg, Stage::Sparse)?),
        Cmd::Importance => print(&run_stage(&cfg, Stage::Importance)?),
        Cmd::Plan {
            target_flops_ratio,
            tolerance,
            interval_lo,
            interval_hi,
        } => {
            if let Some(r) = target_flops_ratio {
                cfg.budget.target_ratio = Some(r);
                cfg.budget.target_flops = None;
            }
            cfg.budget.tolerance = tolerance.unwrap_or(cfg.budget.tolerance);
            cfg.budget.interval_lo = interval_lo.unwrap_or(cfg.budget.interval_lo);
            cfg.budget.interval_hi = interval_hi.unwrap_or(cfg.budget.interval_hi);
            print(&run_stage(&cfg, Stage::Plan)?)
        }
        Cmd::Inherit { criterion } => {
            if let Some(c) = criterion {
                cfg.inherit = c.parse::<InheritMode>()?;
            }
            print(&run_stage(&cfg, Stage::Inherit)?)
        }
        Cmd::Finetune => print(&run_stage(&cfg, Stage::Finetune)?),
        Cmd::Eval { snap } => {
            let s = snapshot_from(&snap, &cfg.out_dir)?;
            let data = load_data(&cfg.data, cfg.seed)?;
            let acc = evaluate_accuracy(&s, &data.val)?;
            print(&serde_json::json!({ "arch_name": s.arch_name, "val_accuracy": acc }))
        }
        Cmd::Report { snap, plan } => {
            let s = snapshot_from(&snap, &cfg.out_dir)?;
            let config = match plan {
                Some(p) => read_json::<PruningPlan>(&p)?.config,
                None => Default::default(),
            };
            print(&evaluate_cost(&s, &config)?)
        }
        Cmd::Pipeline => print(&run_pipeline(&cfg, from)?),
        Cmd::Ablation => print(&run_ablation(&cfg, from)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
