//! Run orchestration: config files, run directories, two-stage training,
//! evaluation, and ablations.
//!
//! A run is described by one TOML file with `[model]`, `[distill]`,
//! `[[committee]]`, `[dataset]`, `[optimizer]`, and `[run]` sections.
//! The resolved config (defaults materialized) is echoed into the run
//! directory so any run can be reproduced from its artifacts alone.

pub mod ablate;
pub mod evaluate;
pub mod forward;
pub mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{make_synthetic_dataset, DatasetConfig, SyntheticDataset};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::losses::DistillConfig;
use crate::model::{select_levels, ModelConfig};
use crate::optim::{OptimConfig, Schedule};
use crate::teachers::synthetic::{BiasKind, SyntheticTeacher, SyntheticTeacherSpec};
use crate::teachers::{file_member, synthetic_member, Committee};

/// Environment variable naming the root under which relative run output
/// directories are created.
pub const OUTPUT_ROOT_ENV: &str = "SAK_OUTPUT_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    #[serde(default = "default_reduction")]
    pub adapter_reduction: usize,
}

fn default_reduction() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CommitteeEntry {
    Synthetic {
        teacher_id: String,
        seed: u64,
        #[serde(default)]
        channel_dim: Option<usize>,
        #[serde(default)]
        grid: Option<Grid>,
        bias_kind: BiasKind,
        #[serde(default = "default_strength")]
        bias_strength: f64,
    },
    File {
        path: PathBuf,
    },
}

fn default_strength() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub stage1_checkpoint: Option<PathBuf>,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Router noise during stage-2 training (always off at evaluation).
    #[serde(default = "default_true")]
    pub router_noise: bool,
}

fn default_log_every() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub distill: DistillConfig,
    pub committee: Vec<CommitteeEntry>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub optimizer: Option<OptimConfig>,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("bad run config: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("serialize config: {e}")))
    }

    /// Desk-scale stage defaults, scaled down from the usual two-stage
    /// recipe: stage 1 cosine at 1e-3 with 5% warmup, stage 2 poly at
    /// 2e-5 with gradient clipping at 10.
    pub fn effective_optimizer(&self) -> OptimConfig {
        if let Some(opt) = &self.optimizer {
            return opt.clone();
        }
        if self.run.stage == 1 {
            OptimConfig {
                kind: "adamw".into(),
                lr: 1e-3,
                weight_decay: 1e-2,
                schedule: Schedule::Cosine,
                warmup_frac: 0.05,
                grad_clip: 0.0,
            }
        } else {
            OptimConfig {
                kind: "adamw".into(),
                lr: 2e-5,
                weight_decay: 1e-6,
                schedule: Schedule::Poly,
                warmup_frac: 0.0,
                grad_clip: 10.0,
            }
        }
    }
}

/// A run config with everything materialized: model config, committee,
/// dataset, optimizer, and the created run directory.
pub struct Resolved {
    pub config: RunConfig,
    pub model: ModelConfig,
    pub committee: Committee,
    pub dataset: SyntheticDataset,
    pub optimizer: OptimConfig,
    pub run_dir: PathBuf,
}

/// Resolve `output_dir` against `SAK_OUTPUT_ROOT` when relative.
pub fn resolve_output_dir(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(dir),
        None => dir.to_path_buf(),
    }
}

/// Stage-2 runs normally refuse to start without a stage-1 checkpoint;
/// the ablation runner opts out through this flag.
pub struct ResolveOptions {
    pub allow_fresh_stage2: bool,
}

impl Default for ResolveOptions {
    fn default() -> Self {
        ResolveOptions {
            allow_fresh_stage2: false,
        }
    }
}

pub fn resolve(config: &RunConfig) -> Result<Resolved> {
    resolve_with(config, &ResolveOptions::default())
}

pub fn resolve_with(config: &RunConfig, opts: &ResolveOptions) -> Result<Resolved> {
    if config.run.stage != 1 && config.run.stage != 2 {
        return Err(Error::config(format!(
            "run.stage must be 1 or 2, got {}",
            config.run.stage
        )));
    }
    if config.run.batch_size == 0 {
        return Err(Error::config("run.batch_size must be >= 1"));
    }
    if config.committee.is_empty() {
        return Err(Error::config("committee must declare at least one teacher"));
    }
    if config.run.stage == 2 && config.run.stage1_checkpoint.is_none() && !opts.allow_fresh_stage2
    {
        return Err(Error::config(
            "stage 2 requires run.stage1_checkpoint (the no_stage1 ablation skips it)",
        ));
    }

    config.distill.validate()?;
    config.dataset.validate()?;
    if config.dataset.resolution != config.model.image_size {
        return Err(Error::config(format!(
            "dataset resolution {} must match model image_size {}",
            config.dataset.resolution, config.model.image_size
        )));
    }

    let side = config.model.image_size / config.model.patch_size.max(1);
    let student_grid = Grid::new(side, side);
    let levels = select_levels(config.model.depth)?;

    let mut members = Vec::new();
    for entry in &config.committee {
        match entry {
            CommitteeEntry::Synthetic {
                teacher_id,
                seed,
                channel_dim,
                grid,
                bias_kind,
                bias_strength,
            } => {
                let spec = SyntheticTeacherSpec {
                    teacher_id: teacher_id.clone(),
                    seed: *seed,
                    channel_dim: channel_dim.unwrap_or(config.model.embed_dim),
                    grid: grid.unwrap_or(student_grid),
                    bias_kind: *bias_kind,
                    bias_strength: *bias_strength,
                };
                members.push(synthetic_member(SyntheticTeacher::new(spec)));
            }
            CommitteeEntry::File { path } => {
                let reader = crate::teachers::feature_file::FeatureFileReader::open(path)?;
                reader.check_levels(&levels)?;
                members.push(file_member(reader));
            }
        }
    }
    let committee = Committee { members };

    let model = ModelConfig {
        image_size: config.model.image_size,
        patch_size: config.model.patch_size,
        depth: config.model.depth,
        embed_dim: config.model.embed_dim,
        num_heads: config.model.num_heads,
        num_teachers: committee.len(),
        adapter_reduction: config.model.adapter_reduction,
        teacher_specs: committee.specs(),
        task_specs: config.dataset.task_specs(),
        seed: config.run.seed,
    };
    model.validate()?;
    for spec in &model.task_specs {
        spec.validate()?;
    }

    let dataset = make_synthetic_dataset(&config.dataset)?;

    let run_dir = resolve_output_dir(&config.run.output_dir);
    std::fs::create_dir_all(&run_dir)?;

    let mut echo = config.clone();
    echo.optimizer = Some(config.effective_optimizer());
    std::fs::write(run_dir.join("config.resolved.toml"), echo.to_toml()?)?;

    Ok(Resolved {
        config: config.clone(),
        model,
        committee,
        dataset,
        optimizer: config.effective_optimizer(),
        run_dir,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
[model]
image_size = 32
patch_size = 8
depth = 4
embed_dim = 32
num_heads = 4

[distill]
alpha = 0.9
beta = 0.1

[[committee]]
kind = "synthetic"
teacher_id = "low"
seed = 11
bias_kind = "lowpass-semantic"

[[committee]]
kind = "synthetic"
teacher_id = "high"
seed = 12
bias_kind = "highpass-edge"

[dataset]
seed = 3
num_samples = 8
val_samples = 2
resolution = 32

[[dataset.tasks]]
name = "blobs"
kind = "semseg"
num_classes = 2
affinity = "lowpass-semantic"

[[dataset.tasks]]
name = "edges"
kind = "boundary"
affinity = "highpass-edge"

[run]
stage = 1
steps = 3
batch_size = 2
seed = 42
output_dir = "run-test"
"#;

    #[test]
    fn parse_and_resolve_sample_config() {
        let cfg = RunConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.committee.len(), 2);
        assert_eq!(cfg.dataset.tasks.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = cfg;
        cfg.run.output_dir = dir.path().join("run-test");
        let resolved = resolve(&cfg).unwrap();
        assert_eq!(resolved.model.num_teachers, 2);
        assert_eq!(resolved.model.task_specs.len(), 2);
        assert!(resolved.run_dir.join("config.resolved.toml").exists());
        // echo reparses and keeps the materialized optimizer
        let echo = RunConfig::from_path(&resolved.run_dir.join("config.resolved.toml")).unwrap();
        assert!(echo.optimizer.is_some());
    }

    #[test]
    fn stage2_without_checkpoint_rejected() {
        let mut cfg = RunConfig::from_toml(SAMPLE).unwrap();
        cfg.run.stage = 2;
        let dir = tempfile::tempdir().unwrap();
        cfg.run.output_dir = dir.path().to_path_buf();
        assert!(matches!(resolve(&cfg), Err(Error::Config(_))));
        // but the ablation path may opt in to a fresh stage 2
        let opts = ResolveOptions {
            allow_fresh_stage2: true,
        };
        assert!(resolve_with(&cfg, &opts).is_ok());
    }

    #[test]
    fn unknown_fields_rejected_by_parser() {
        let bad = format!("nonsense_key = 1\n{SAMPLE}");
        assert!(RunConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn dataset_resolution_must_match_image_size() {
        let mut cfg = RunConfig::from_toml(SAMPLE).unwrap();
        cfg.dataset.resolution = 64;
        let dir = tempfile::tempdir().unwrap();
        cfg.run.output_dir = dir.path().to_path_buf();
        assert!(resolve(&cfg).is_err());
    }
}
