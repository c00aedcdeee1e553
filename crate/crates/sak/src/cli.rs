//! Command-line surface: `distill`, `train`, `eval`, `ablate`, `report`,
//! and `plot`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::pipeline::ablate::{ablate, Variant};
use crate::pipeline::evaluate::{evaluate, read_metrics_csv, write_metrics_csv};
use crate::pipeline::forward::{Fusion, GraphOptions};
use crate::pipeline::train::{stage1, stage2};
use crate::pipeline::{resolve, resolve_with, ResolveOptions, RunConfig};

#[derive(Parser)]
#[command(
    name = "sak",
    about = "Multi-teacher distillation with adapter paths and per-task representation routing",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage-1 distillation pretraining (config with run.stage = 1).
    Distill(ConfigArgs),
    /// Stage-2 joint multi-task training (config with run.stage = 2).
    Train(TrainArgs),
    /// Evaluate a checkpoint: metrics, gates, optional multi-task gain.
    Eval(EvalArgs),
    /// Run a named ablation against the paired base run.
    Ablate(AblateArgs),
    /// Multi-task gain and bias arithmetic from metric CSVs (no model).
    Report(ReportArgs),
    /// Render loss curves and gate heatmaps from run artifacts.
    Plot(PlotArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run config TOML.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override run.stage1_checkpoint from the config.
    #[arg(long)]
    stage1_checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config supplying the dataset (model comes from the checkpoint).
    #[arg(long)]
    config: PathBuf,
    /// Single-task baseline metrics CSV for the multi-task gain.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Output directory (default: eval/ next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate the training split instead of validation.
    #[arg(long)]
    train_split: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// One of: no_tsap, no_mor, addition_fusion, no_stage1,
    /// no_stage2_distill.
    #[arg(long)]
    variant: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics CSV of the multi-task model (task,metric,value).
    #[arg(long)]
    multi: PathBuf,
    /// Metrics CSV of the single-task baseline.
    #[arg(long)]
    single: PathBuf,
    /// Tasks whose metric improves downward (default: inferred from
    /// metric names mErr/RMSE).
    #[arg(long)]
    lower_better: Vec<String>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Run directory holding losses.jsonl and gates.csv.
    #[arg(long)]
    run: PathBuf,
    /// Output directory (default: the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Infer the graph degenerations a checkpoint was trained with from its
/// parameter names.
pub fn options_from_params(params: &crate::params::ParamSet) -> GraphOptions {
    let has_router = params.names().any(|n| n.starts_with("router."));
    let has_tsap = params.names().any(|n| n.starts_with("tsap0."));
    GraphOptions {
        no_tsap: !has_tsap,
        fusion: if has_router {
            Fusion::Router
        } else {
            Fusion::Addition
        },
    }
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let run_cfg = RunConfig::from_path(&args.config)?;
    let resolved = resolve_with(
        &run_cfg,
        &ResolveOptions {
            allow_fresh_stage2: true,
        },
    )?;

    // the dataset must agree with the checkpoint's task set
    let ckpt_tasks: Vec<&str> = ckpt.config.task_specs.iter().map(|t| t.name.as_str()).collect();
    let data_tasks: Vec<&str> = resolved
        .model
        .task_specs
        .iter()
        .map(|t| t.name.as_str())
        .collect();
    if ckpt_tasks != data_tasks {
        return Err(Error::config(format!(
            "checkpoint tasks {ckpt_tasks:?} do not match dataset tasks {data_tasks:?}"
        )));
    }
    let has_heads = ckpt.params.names().any(|n| n.starts_with("head."));
    if !has_heads {
        return Err(Error::config(
            "checkpoint has no task heads; evaluate a stage-2 checkpoint",
        ));
    }

    let baseline = match &args.baseline {
        Some(path) => Some(read_metrics_csv(std::fs::File::open(path)?)?),
        None => None,
    };
    let options = options_from_params(&ckpt.params);
    let samples = if args.train_split {
        &resolved.dataset.train
    } else {
        &resolved.dataset.val
    };
    let report = evaluate(
        &ckpt.params,
        &ckpt.config,
        samples,
        options,
        baseline.as_deref(),
    )?;

    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| {
            args.checkpoint
                .parent()
                .unwrap_or(std::path::Path::new("."))
                .join("eval")
        });
    std::fs::create_dir_all(&out_dir)?;
    let mut metrics_file = std::fs::File::create(out_dir.join("metrics.csv"))?;
    write_metrics_csv(&report.metrics, &mut metrics_file)?;
    let mut gates_file = std::fs::File::create(out_dir.join("gates.csv"))?;
    crate::router::write_gate_csv(&report.gate_rows, &mut gates_file)?;
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    println!("evaluation written to {}", out_dir.display());
    for row in &report.metrics {
        println!("  {} {} = {:.4}", row.task, row.metric, row.value);
    }
    if let Some(dm) = report.delta_m {
        println!("  multi-task gain = {dm:+.2}%");
    }
    Ok(())
}

fn run_plot(args: &PlotArgs) -> Result<()> {
    let out_dir = args.out.clone().unwrap_or_else(|| args.run.clone());
    std::fs::create_dir_all(&out_dir)?;
    let losses_path = args.run.join("losses.jsonl");
    if losses_path.exists() {
        let mut losses = Vec::new();
        for line in std::fs::read_to_string(&losses_path)?.lines() {
            if line.trim().is_empty() {
                continue;
            }
            losses.push(
                serde_json::from_str(line)
                    .map_err(|e| Error::Format(format!("bad loss record: {e}")))?,
            );
        }
        crate::plot::loss_curve(&losses, &out_dir.join("loss_curve.png"))?;
        println!("wrote {}", out_dir.join("loss_curve.png").display());
    }
    let gates_path = args.run.join("gates.csv");
    if gates_path.exists() {
        let mut rows = Vec::new();
        let mut reader = csv::Reader::from_reader(std::fs::File::open(&gates_path)?);
        for record in reader.deserialize::<crate::router::GateReportRow>() {
            rows.push(record.map_err(|e| Error::Format(format!("bad gate row: {e}")))?);
        }
        crate::plot::gate_heatmap(&rows, &out_dir.join("gate_heatmap.png"))?;
        println!("wrote {}", out_dir.join("gate_heatmap.png").display());
    }
    Ok(())
}

/// Run the CLI; the caller maps errors to exit codes.
pub fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Distill(args) => {
            let config = RunConfig::from_path(&args.config)?;
            if config.run.stage != 1 {
                return Err(Error::config("distill expects run.stage = 1"));
            }
            let resolved = resolve(&config)?;
            let outcome = stage1(&resolved, GraphOptions::default())?;
            println!(
                "stage 1 done: {} steps, final distill loss {:.6}, checkpoint {}",
                outcome.losses.len(),
                outcome.losses.last().map(|l| l.distill_total).unwrap_or(0.0),
                outcome.checkpoint_path.display()
            );
            if let Some(rep) = &outcome.rep_similarity {
                println!("rep similarity: {:.4} (mean over teachers)", rep.average);
            }
            Ok(())
        }
        Command::Train(args) => {
            let mut config = RunConfig::from_path(&args.config)?;
            if let Some(path) = &args.stage1_checkpoint {
                config.run.stage1_checkpoint = Some(path.clone());
            }
            if config.run.stage != 2 {
                return Err(Error::config("train expects run.stage = 2"));
            }
            let resolved = resolve(&config)?;
            let stage1_params = match &config.run.stage1_checkpoint {
                Some(path) => Some(checkpoint::load(path)?.params),
                None => None,
            };
            let outcome = stage2(
                &resolved,
                GraphOptions::default(),
                stage1_params.as_ref(),
                None,
            )?;
            println!(
                "stage 2 done: {} steps, final joint loss {:.6}, val task loss {:.6}, checkpoint {}",
                outcome.losses.len(),
                outcome.losses.last().map(|l| l.grand_total).unwrap_or(0.0),
                outcome.final_val_task_loss.unwrap_or(f64::NAN),
                outcome.checkpoint_path.display()
            );
            Ok(())
        }
        Command::Eval(args) => run_eval(args),
        Command::Ablate(args) => {
            let config = RunConfig::from_path(&args.config)?;
            let variant: Variant = args.variant.parse()?;
            let comparison = ablate(&config, variant)?;
            println!(
                "ablation {}: base loss {:.6} vs {} loss {:.6}",
                comparison.variant,
                comparison.base.final_loss,
                comparison.ablated.name,
                comparison.ablated.final_loss
            );
            if let (Some(b), Some(a)) = (
                comparison.base.rep_similarity,
                comparison.ablated.rep_similarity,
            ) {
                println!("rep similarity: base {b:.4} vs ablated {a:.4}");
            }
            Ok(())
        }
        Command::Report(args) => {
            let report =
                crate::report::from_csv_paths(&args.multi, &args.single, &args.lower_better)?;
            let json = crate::report::to_json(&report)?;
            match &args.out {
                Some(path) => std::fs::write(path, &json)?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Plot(args) => run_plot(args),
    }
}
