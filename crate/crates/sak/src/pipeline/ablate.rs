//! Paired ablation runs: the base run and one named degenerate variant
//! share seed and data order, differing only in the ablated mechanism.

use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::pipeline::forward::{Fusion, GraphOptions};
use crate::pipeline::train::{stage1, stage2, TrainOutcome};
use crate::pipeline::{resolve_with, Resolved, ResolveOptions, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Shared representation matched to all teachers; no adapter paths.
    NoTsap,
    /// Unweighted expert sum instead of learned gates.
    AdditionFusion,
    /// Alias of `AdditionFusion`.
    NoMor,
    /// Stage 2 from scratch, skipping the stage-1 checkpoint.
    NoStage1,
    /// Stage 2 with the distillation term removed (gamma = 0).
    NoStage2Distill,
}

pub const VARIANT_NAMES: &[&str] = &[
    "no_tsap",
    "addition_fusion",
    "no_mor",
    "no_stage1",
    "no_stage2_distill",
];

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_tsap" => Ok(Variant::NoTsap),
            "addition_fusion" => Ok(Variant::AdditionFusion),
            "no_mor" => Ok(Variant::NoMor),
            "no_stage1" => Ok(Variant::NoStage1),
            "no_stage2_distill" => Ok(Variant::NoStage2Distill),
            other => Err(Error::config(format!(
                "unknown ablation variant {other:?}; expected one of {VARIANT_NAMES:?}"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Variant::NoTsap => "no_tsap",
            Variant::AdditionFusion => "addition_fusion",
            Variant::NoMor => "no_mor",
            Variant::NoStage1 => "no_stage1",
            Variant::NoStage2Distill => "no_stage2_distill",
        };
        f.write_str(name)
    }
}

/// One side of the comparison.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub final_loss: f64,
    pub val_task_loss: Option<f64>,
    pub rep_similarity: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub variant: String,
    pub base: RunSummary,
    pub ablated: RunSummary,
}

fn summarize(name: &str, outcome: &TrainOutcome) -> RunSummary {
    RunSummary {
        name: name.to_string(),
        final_loss: outcome.losses.last().map(|l| l.grand_total).unwrap_or(0.0),
        val_task_loss: outcome.final_val_task_loss,
        rep_similarity: outcome.rep_similarity.as_ref().map(|r| r.average),
    }
}

fn sub_run(config: &RunConfig, dir_name: &str, allow_fresh: bool) -> Result<Resolved> {
    let mut sub = config.clone();
    sub.run.output_dir = config.run.output_dir.join(dir_name);
    resolve_with(
        &sub,
        &ResolveOptions {
            allow_fresh_stage2: allow_fresh,
        },
    )
}

fn load_stage1(path: &Path) -> Result<crate::params::ParamSet> {
    Ok(checkpoint::load(path)?.params)
}

/// Run base and variant with paired seeds and emit the comparison table.
pub fn ablate(config: &RunConfig, variant: Variant) -> Result<Comparison> {
    let comparison = match variant {
        Variant::NoTsap => {
            if config.run.stage != 1 {
                return Err(Error::config("no_tsap ablates a stage-1 config"));
            }
            let base = stage1(&sub_run(config, "base", false)?, GraphOptions::default())?;
            let ablated = stage1(
                &sub_run(config, "no_tsap", false)?,
                GraphOptions {
                    no_tsap: true,
                    fusion: Fusion::Router,
                },
            )?;
            Comparison {
                variant: variant.to_string(),
                base: summarize("base", &base),
                ablated: summarize("no_tsap", &ablated),
            }
        }
        Variant::AdditionFusion | Variant::NoMor => {
            if config.run.stage != 2 {
                return Err(Error::config("addition_fusion ablates a stage-2 config"));
            }
            let ckpt_path = config.run.stage1_checkpoint.clone().ok_or_else(|| {
                Error::config("addition_fusion needs run.stage1_checkpoint")
            })?;
            let s1 = load_stage1(&ckpt_path)?;
            let base = stage2(
                &sub_run(config, "base", false)?,
                GraphOptions::default(),
                Some(&s1),
                None,
            )?;
            let ablated = stage2(
                &sub_run(config, "addition_fusion", false)?,
                GraphOptions {
                    no_tsap: false,
                    fusion: Fusion::Addition,
                },
                Some(&s1),
                None,
            )?;
            Comparison {
                variant: variant.to_string(),
                base: summarize("base", &base),
                ablated: summarize("addition_fusion", &ablated),
            }
        }
        Variant::NoStage1 => {
            if config.run.stage != 2 {
                return Err(Error::config("no_stage1 ablates a stage-2 config"));
            }
            let ckpt_path = config
                .run
                .stage1_checkpoint
                .clone()
                .ok_or_else(|| Error::config("the base run needs run.stage1_checkpoint"))?;
            let s1 = load_stage1(&ckpt_path)?;
            let base = stage2(
                &sub_run(config, "base", false)?,
                GraphOptions::default(),
                Some(&s1),
                None,
            )?;
            let ablated = stage2(
                &sub_run(config, "no_stage1", true)?,
                GraphOptions::default(),
                None,
                None,
            )?;
            Comparison {
                variant: variant.to_string(),
                base: summarize("base", &base),
                ablated: summarize("no_stage1", &ablated),
            }
        }
        Variant::NoStage2Distill => {
            if config.run.stage != 2 {
                return Err(Error::config("no_stage2_distill ablates a stage-2 config"));
            }
            let ckpt_path = config.run.stage1_checkpoint.clone().ok_or_else(|| {
                Error::config("no_stage2_distill needs run.stage1_checkpoint")
            })?;
            let s1 = load_stage1(&ckpt_path)?;
            let base = stage2(
                &sub_run(config, "base", false)?,
                GraphOptions::default(),
                Some(&s1),
                None,
            )?;
            let ablated = stage2(
                &sub_run(config, "no_stage2_distill", false)?,
                GraphOptions::default(),
                Some(&s1),
                Some(0.0),
            )?;
            Comparison {
                variant: variant.to_string(),
                base: summarize("base", &base),
                ablated: summarize("no_stage2_distill", &ablated),
            }
        }
    };

    let out_dir = crate::pipeline::resolve_output_dir(&config.run.output_dir);
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(
        out_dir.join("comparison.json"),
        serde_json::to_string_pretty(&comparison).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    let mut csv_out = String::from("run,final_loss,val_task_loss,rep_similarity\n");
    for side in [&comparison.base, &comparison.ablated] {
        csv_out.push_str(&format!(
            "{},{},{},{}\n",
            side.name,
            side.final_loss,
            side.val_task_loss.map_or(String::new(), |v| v.to_string()),
            side.rep_similarity.map_or(String::new(), |v| v.to_string()),
        ));
    }
    std::fs::write(out_dir.join("comparison.csv"), csv_out)?;
    Ok(comparison)
}
