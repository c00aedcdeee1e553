//! The student network body: patch embedding, transformer stem, per-teacher
//! adapter paths, level selection, and teacher alignment.

pub mod adapter;
pub mod align;
pub mod stem;

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::params::{randn2, stream_rng, ones1, zeros1, zeros2, ParamSet, Stream};
use crate::tasks::TaskSpec;

/// Where a teacher's features come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    Synthetic,
    File,
}

/// Shape contract of one teacher's representations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub teacher_id: String,
    pub channel_dim: usize,
    pub grid: Grid,
    pub kind: TeacherKind,
}

impl TeacherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channel_dim == 0 {
            return Err(Error::config(format!(
                "teacher {}: channel_dim must be >= 1",
                self.teacher_id
            )));
        }
        if self.grid.h == 0 || self.grid.w == 0 {
            return Err(Error::config(format!(
                "teacher {}: grid dims must be >= 1",
                self.teacher_id
            )));
        }
        Ok(())
    }
}

/// Student model hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Transformer depth L; must be divisible by 4 so the level set
    /// {L/4, L/2, 3L/4, L} is unambiguous.
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_teachers: usize,
    #[serde(default = "default_reduction")]
    pub adapter_reduction: usize,
    #[serde(default)]
    pub teacher_specs: Vec<TeacherSpec>,
    #[serde(default)]
    pub task_specs: Vec<TaskSpec>,
    pub seed: u64,
}

fn default_reduction() -> usize {
    4
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth % 4 != 0 {
            return Err(Error::config(format!(
                "depth {} must be a positive multiple of 4",
                self.depth
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.adapter_reduction == 0 || self.embed_dim % self.adapter_reduction != 0 {
            return Err(Error::config(format!(
                "embed_dim {} must be divisible by adapter_reduction {}",
                self.embed_dim, self.adapter_reduction
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !self.teacher_specs.is_empty() && self.teacher_specs.len() != self.num_teachers {
            return Err(Error::config(format!(
                "num_teachers {} does not match {} teacher specs",
                self.num_teachers,
                self.teacher_specs.len()
            )));
        }
        for spec in &self.teacher_specs {
            spec.validate()?;
        }
        Ok(())
    }

    /// Patch grid side length.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.grid_side(), self.grid_side())
    }

    /// Patch token count n.
    pub fn num_tokens(&self) -> usize {
        self.grid().len()
    }

    /// Adapter bottleneck width r = d / reduction.
    pub fn adapter_dim(&self) -> usize {
        self.embed_dim / self.adapter_reduction
    }
}

/// The four evenly distributed block indices whose outputs are distilled
/// and decoded: {L/4, L/2, 3L/4, L}.
pub fn select_levels(depth: usize) -> Result<Vec<usize>> {
    if depth == 0 || depth % 4 != 0 {
        return Err(Error::config(format!(
            "depth {depth} must be a positive multiple of 4"
        )));
    }
    let q = depth / 4;
    Ok(vec![q, 2 * q, 3 * q, depth])
}

/// A set of patch tokens with its spatial layout. Never contains a class
/// token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMap {
    pub tokens: Array2<f64>,
    pub grid: Grid,
    pub level: usize,
}

impl TokenMap {
    pub fn new(tokens: Array2<f64>, grid: Grid, level: usize) -> Result<Self> {
        if tokens.nrows() != grid.len() {
            return Err(Error::config(format!(
                "token count {} does not match grid {}x{}",
                tokens.nrows(),
                grid.h,
                grid.w
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite token entries at level {level}"
            )));
        }
        Ok(TokenMap {
            tokens,
            grid,
            level,
        })
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Token maps indexed by the selected levels.
#[derive(Debug, Clone, Default)]
pub struct MultiLevelFeatures {
    pub levels: BTreeMap<usize, TokenMap>,
}

impl MultiLevelFeatures {
    pub fn new(levels: BTreeMap<usize, TokenMap>) -> Self {
        MultiLevelFeatures { levels }
    }

    /// Check that the level keys are exactly the student's selected set.
    pub fn check_levels(&self, expected: &[usize]) -> Result<()> {
        let keys: Vec<usize> = self.levels.keys().copied().collect();
        if keys != expected {
            return Err(Error::LevelMismatch(format!(
                "levels {keys:?} do not match expected {expected:?}"
            )));
        }
        Ok(())
    }

    pub fn get(&self, level: usize) -> Option<&TokenMap> {
        self.levels.get(&level)
    }
}

/// Adapter parameters for one residual adapter.
#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub w_down: Array2<f64>,
    pub w_up: Array2<f64>,
    pub alpha: f64,
}

impl AdapterParams {
    pub fn validate(&self, embed_dim: usize, adapter_dim: usize) -> Result<()> {
        if self.w_down.nrows() != embed_dim || self.w_down.ncols() != adapter_dim {
            return Err(Error::config(format!(
                "w_down shape {:?}, expected {}x{}",
                self.w_down.shape(),
                embed_dim,
                adapter_dim
            )));
        }
        if self.w_up.nrows() != adapter_dim || self.w_up.ncols() != embed_dim {
            return Err(Error::config(format!(
                "w_up shape {:?}, expected {}x{}",
                self.w_up.shape(),
                adapter_dim,
                embed_dim
            )));
        }
        let finite = self.w_down.iter().chain(self.w_up.iter()).all(|v| v.is_finite());
        if !finite || !self.alpha.is_finite() {
            return Err(Error::numeric("non-finite adapter parameters".to_string()));
        }
        Ok(())
    }
}

/// The student model: configuration plus every trainable tensor of the
/// stem, the adapter paths, and the teacher-alignment layers. Routers and
/// heads are added separately for the multi-task stage.
pub struct StudentModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl StudentModel {
    /// Initialize from the config's seed: stem weights Gaussian (std 0.02),
    /// adapter down-projections Gaussian, up-projections zero, alpha 1 —
    /// so every adapter path starts as an identity accumulation.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, Stream::Init);
        let mut params = ParamSet::new();
        let d = config.embed_dim;
        let n = config.num_tokens();
        let patch_in = 3 * config.patch_size * config.patch_size;
        let std = 0.02;

        params.insert("stem.patch.w", randn2(&mut rng, patch_in, d, std).into_dyn());
        params.insert("stem.patch.b", zeros1(d).into_dyn());
        params.insert("stem.pos", randn2(&mut rng, n + 1, d, std).into_dyn());
        params.insert("stem.cls", randn2(&mut rng, 1, d, std).into_dyn());
        for block in 0..config.depth {
            let p = format!("stem.block{block}");
            params.insert(format!("{p}.ln1.gamma"), ones1(d).into_dyn());
            params.insert(format!("{p}.ln1.beta"), zeros1(d).into_dyn());
            params.insert(
                format!("{p}.attn.w_qkv"),
                randn2(&mut rng, d, 3 * d, std).into_dyn(),
            );
            params.insert(format!("{p}.attn.b_qkv"), zeros1(3 * d).into_dyn());
            params.insert(
                format!("{p}.attn.w_proj"),
                randn2(&mut rng, d, d, std).into_dyn(),
            );
            params.insert(format!("{p}.attn.b_proj"), zeros1(d).into_dyn());
            params.insert(format!("{p}.ln2.gamma"), ones1(d).into_dyn());
            params.insert(format!("{p}.ln2.beta"), zeros1(d).into_dyn());
            params.insert(
                format!("{p}.mlp.w1"),
                randn2(&mut rng, d, 4 * d, std).into_dyn(),
            );
            params.insert(format!("{p}.mlp.b1"), zeros1(4 * d).into_dyn());
            params.insert(
                format!("{p}.mlp.w2"),
                randn2(&mut rng, 4 * d, d, std).into_dyn(),
            );
            params.insert(format!("{p}.mlp.b2"), zeros1(d).into_dyn());
        }

        let r = config.adapter_dim();
        for teacher in 0..config.num_teachers {
            for level in 0..=config.depth {
                let p = format!("tsap{teacher}.a{level}");
                params.insert(
                    format!("{p}.w_down"),
                    randn2(&mut rng, d, r, std).into_dyn(),
                );
                params.insert(format!("{p}.w_up"), zeros2(r, d).into_dyn());
                params.insert(
                    format!("{p}.alpha"),
                    ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), 1.0),
                );
            }
        }

        // Channel-alignment layers exist only where student and teacher
        // widths differ; spatial alignment is a fixed resampling.
        let levels = select_levels(config.depth)?;
        for (t, spec) in config.teacher_specs.iter().enumerate() {
            if spec.channel_dim != d {
                let map_std = 1.0 / (d as f64).sqrt();
                for level in &levels {
                    let p = format!("align.t{t}.l{level}");
                    params.insert(
                        format!("{p}.w"),
                        randn2(&mut rng, d, spec.channel_dim, map_std).into_dyn(),
                    );
                    params.insert(format!("{p}.b"), zeros1(spec.channel_dim).into_dyn());
                }
            }
        }

        Ok(StudentModel { config, params })
    }

    pub fn levels(&self) -> Vec<usize> {
        select_levels(self.config.depth).expect("validated config")
    }
}

/// Parameter-count report for the efficiency property: each adapter path
/// should stay below 5% of the stem.
#[derive(Debug, Clone, Serialize)]
pub struct ParamReport {
    pub tas_params: usize,
    pub per_tsap_params: Vec<usize>,
    pub ratio: f64,
    pub within_budget: bool,
}

/// Exact parameter counts from the stored tensors.
pub fn count_params(model: &StudentModel) -> ParamReport {
    let tas = model.params.count_scalars("stem.");
    let per_tsap: Vec<usize> = (0..model.config.num_teachers)
        .map(|t| model.params.count_scalars(&format!("tsap{t}.")))
        .collect();
    let worst = per_tsap.iter().copied().max().unwrap_or(0);
    let ratio = if tas > 0 { worst as f64 / tas as f64 } else { 0.0 };
    ParamReport {
        tas_params: tas,
        per_tsap_params: per_tsap,
        ratio,
        within_budget: ratio < 0.05,
    }
}
