//! Shared forward-graph construction for training and evaluation.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{adapter, align, stem, ModelConfig, MultiLevelFeatures};
use crate::params::Bound;
use crate::router;
use crate::tape::{Tape, Var};
use crate::tasks::{heads, TaskKind, TaskSpec};

/// How experts are fused per task and level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// Learned per-task gates over the expert representations.
    Router,
    /// Unweighted sum of the expert representations.
    Addition,
}

/// Architecture degenerations used by training and ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphOptions {
    /// Drop the adapter paths: one shared representation is aligned to
    /// every teacher and is the only expert.
    pub no_tsap: bool,
    pub fusion: Fusion,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            no_tsap: false,
            fusion: Fusion::Router,
        }
    }
}

/// Per-sample student features on the tape.
pub struct SampleFeatures {
    /// Stem (teacher-agnostic) patch maps at the selected levels.
    pub z_sel: BTreeMap<usize, Var>,
    /// Adapter-path patch maps at the selected levels, one entry per
    /// teacher; empty under `no_tsap`.
    pub tsap_sel: Vec<BTreeMap<usize, Var>>,
}

/// Embed an image and run stem plus adapter paths.
pub fn features(
    tape: &Tape,
    bound: &Bound<'_>,
    config: &ModelConfig,
    image: &Array3<f64>,
    no_tsap: bool,
) -> Result<SampleFeatures> {
    let x0 = stem::embed(tape, bound, config, image)?;
    let states = stem::forward(tape, bound, config, x0)?;
    let mut patch_maps = Vec::with_capacity(config.depth + 1);
    patch_maps.push(stem::patch_rows(tape, config, x0));
    for state in &states {
        patch_maps.push(stem::patch_rows(tape, config, *state));
    }
    let levels = crate::model::select_levels(config.depth)?;
    let z_sel: BTreeMap<usize, Var> = levels.iter().map(|&l| (l, patch_maps[l])).collect();

    let mut tsap_sel = Vec::new();
    if !no_tsap {
        for teacher in 0..config.num_teachers {
            let rs = adapter::path_forward(tape, bound, config, teacher, &patch_maps)?;
            tsap_sel.push(levels.iter().map(|&l| (l, rs[l])).collect());
        }
    }
    Ok(SampleFeatures {
        z_sel,
        tsap_sel,
    })
}

/// Aligned student features per teacher (the distillation inputs).
/// Under `no_tsap` the shared stem representation is aligned to every
/// teacher; otherwise each adapter path is aligned to its own teacher.
pub fn aligned_students(
    tape: &Tape,
    bound: &Bound<'_>,
    config: &ModelConfig,
    feats: &SampleFeatures,
    no_tsap: bool,
) -> Result<Vec<BTreeMap<usize, Var>>> {
    let student_grid = config.grid();
    let mut out = Vec::with_capacity(config.num_teachers);
    for (t, spec) in config.teacher_specs.iter().enumerate() {
        let source = if no_tsap {
            &feats.z_sel
        } else {
            &feats.tsap_sel[t]
        };
        let mut per_level = BTreeMap::new();
        for (&level, &var) in source {
            let aligned = align::to_teacher(
                tape,
                bound,
                t,
                level,
                student_grid,
                config.embed_dim,
                var,
                spec,
            )?;
            per_level.insert(level, aligned);
        }
        out.push(per_level);
    }
    Ok(out)
}

/// Teacher features as tape constants, aligned shapes assumed.
pub fn teacher_constants(
    features: &[MultiLevelFeatures],
) -> Vec<BTreeMap<usize, ndarray::Array2<f64>>> {
    features
        .iter()
        .map(|f| {
            f.levels
                .iter()
                .map(|(l, map)| (*l, map.tokens.clone()))
                .collect()
        })
        .collect()
}

/// One task's prediction node (probability space for classification-style
/// tasks) plus the gates that produced it.
pub struct TaskPass {
    pub preds: BTreeMap<String, Var>,
    /// Gate values per (task, level), recorded as plain numbers.
    pub gates: BTreeMap<(String, usize), Vec<f64>>,
}

/// Routers, fusion, heads, and output activations for every task.
pub fn task_forward(
    tape: &Tape,
    bound: &Bound<'_>,
    config: &ModelConfig,
    feats: &SampleFeatures,
    options: GraphOptions,
    mut noise_rng: Option<&mut ChaCha8Rng>,
    label_grid: Grid,
) -> Result<TaskPass> {
    let n_experts = 1 + feats.tsap_sel.len();
    let mut preds = BTreeMap::new();
    let mut gates_out = BTreeMap::new();
    for spec in &config.task_specs {
        let mut fused_levels = BTreeMap::new();
        for (&level, &z) in &feats.z_sel {
            let mut experts = Vec::with_capacity(n_experts);
            experts.push(z);
            for tsap in &feats.tsap_sel {
                experts.push(tsap[&level]);
            }
            let fused = match options.fusion {
                Fusion::Router if n_experts > 1 => {
                    let out = router::forward(
                        tape,
                        bound,
                        &spec.name,
                        level,
                        z,
                        n_experts,
                        noise_rng.as_deref_mut(),
                    )?;
                    let gate_row = tape.value2(out.gates).row(0).to_vec();
                    gates_out.insert((spec.name.clone(), level), gate_row);
                    router::mix(tape, out.gates, &experts)?
                }
                Fusion::Router => {
                    // single expert: gate is trivially 1
                    gates_out.insert((spec.name.clone(), level), vec![1.0]);
                    experts[0]
                }
                Fusion::Addition => {
                    let mut acc = experts[0];
                    for e in &experts[1..] {
                        acc = tape.add(acc, *e);
                    }
                    acc
                }
            };
            fused_levels.insert(level, fused);
        }
        let logits = heads::forward(tape, bound, spec, &fused_levels, config.grid(), label_grid)?;
        let pred = match spec.kind {
            TaskKind::Semseg | TaskKind::Parsing => tape.softmax_rows(logits),
            TaskKind::Saliency | TaskKind::Boundary => tape.sigmoid(logits),
            TaskKind::Normal | TaskKind::Depth => logits,
        };
        preds.insert(spec.name.clone(), pred);
    }
    Ok(TaskPass {
        preds,
        gates: gates_out,
    })
}

/// Register stage-2 parameters (routers and heads) on top of a stage-1
/// parameter set. Router fusion needs router parameters; addition fusion
/// does not.
pub fn init_stage2_params(
    params: &mut crate::params::ParamSet,
    config: &ModelConfig,
    fusion: Fusion,
    no_tsap: bool,
) -> Result<()> {
    let levels = crate::model::select_levels(config.depth)?;
    let mut rng = crate::params::stream_rng(
        config.seed ^ 0x5354_3247, // distinct stream from stage-1 init
        crate::params::Stream::Init,
    );
    let n_experts = if no_tsap { 1 } else { 1 + config.num_teachers };
    if fusion == Fusion::Router && n_experts > 1 {
        for spec in &config.task_specs {
            for &level in &levels {
                router::init_params(
                    params,
                    &mut rng,
                    &spec.name,
                    level,
                    config.embed_dim,
                    n_experts,
                );
            }
        }
    }
    for spec in &config.task_specs {
        heads::init_params(params, &mut rng, spec, config.embed_dim, &levels);
    }
    Ok(())
}

/// Batch task losses from per-sample passes.
pub fn batch_task_losses(
    tape: &Tape,
    specs: &[TaskSpec],
    passes: &[TaskPass],
    labels: &[&BTreeMap<String, crate::tasks::loss::Label>],
) -> Result<BTreeMap<String, Var>> {
    let mut out = BTreeMap::new();
    for spec in specs {
        let mut preds = Vec::with_capacity(passes.len());
        let mut gts = Vec::with_capacity(passes.len());
        for (pass, label_map) in passes.iter().zip(labels) {
            let pred = pass
                .preds
                .get(&spec.name)
                .ok_or_else(|| Error::config(format!("no prediction for task {}", spec.name)))?;
            let gt = label_map
                .get(&spec.name)
                .ok_or_else(|| Error::config(format!("no label for task {}", spec.name)))?;
            preds.push(*pred);
            gts.push(gt);
        }
        let loss = crate::tasks::loss::task_loss_batch(tape, spec, &preds, &gts)?;
        out.insert(spec.name.clone(), loss);
    }
    Ok(out)
}
