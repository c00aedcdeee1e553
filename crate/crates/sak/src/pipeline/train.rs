//! The two training stages.
//!
//! Stage 1 trains stem, adapter paths, and alignment layers on images
//! only, minimizing the distillation objective. Stage 2 adds routers and
//! heads and trains the whole student on the joint objective, keeping the
//! distillation term unless ablated. Both stages are single-threaded and
//! bit-deterministic for a fixed seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use ndarray::Array3;

use crate::checkpoint;
use crate::data::augment::{augment, AugmentPolicy};
use crate::error::{Error, Result};
use crate::losses::{distill_loss, LossBreakdown};
use crate::model::{MultiLevelFeatures, StudentModel, TokenMap};
use crate::optim::{collect_grads, AdamW};
use crate::params::{stream_rng, ParamSet, Stream};
use crate::pipeline::evaluate::{gate_report_rows, validation_task_loss};
use crate::pipeline::forward::{
    self, aligned_students, batch_task_losses, features, init_stage2_params, teacher_constants, GraphOptions,
};
use crate::pipeline::Resolved;
use crate::tape::{Tape, Var};
use crate::tasks::metrics::{rep_similarity, RepSimilarity};

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint_path: PathBuf,
    pub losses: Vec<LossBreakdown>,
    pub rep_similarity: Option<RepSimilarity>,
    pub final_val_task_loss: Option<f64>,
}

/// Deterministic shuffled batch order over `n` samples.
struct BatchOrder {
    order: Vec<usize>,
    pos: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BatchOrder {
    fn new(n: usize, rng: rand_chacha::ChaCha8Rng) -> Self {
        let mut s = BatchOrder {
            order: (0..n).collect(),
            pos: 0,
            rng,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        use rand::Rng;
        for i in (1..self.order.len()).rev() {
            let j = (self.rng.random::<u64>() as usize) % (i + 1);
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(k);
        for _ in 0..k {
            if self.pos >= self.order.len() {
                self.shuffle();
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

/// Teacher features per training sample, cached when augmentation is off
/// (frozen teachers are pure functions of the image).
struct TeacherFeatures<'a> {
    resolved: &'a Resolved,
    levels: Vec<usize>,
    cache: Vec<Option<Vec<MultiLevelFeatures>>>,
}

impl<'a> TeacherFeatures<'a> {
    fn new(resolved: &'a Resolved, levels: Vec<usize>) -> Self {
        TeacherFeatures {
            resolved,
            levels,
            cache: vec![None; resolved.dataset.train.len() + resolved.dataset.val.len()],
        }
    }

    fn for_image(
        &mut self,
        index: usize,
        image: &Array3<f64>,
        cacheable: bool,
    ) -> Result<Vec<MultiLevelFeatures>> {
        if cacheable {
            if self.cache[index].is_none() {
                self.cache[index] =
                    Some(self.resolved.committee.forward(image, index, &self.levels)?);
            }
            Ok(self.cache[index].clone().unwrap())
        } else {
            self.resolved.committee.forward(image, index, &self.levels)
        }
    }
}

fn augment_policy(resolved: &Resolved) -> AugmentPolicy {
    AugmentPolicy {
        scale_range: (0.5, 2.0),
        crop: (resolved.model.image_size, resolved.model.image_size),
        hflip: true,
        jitter: 0.2,
    }
}

struct LossLog {
    file: std::io::BufWriter<std::fs::File>,
}

impl LossLog {
    fn create(path: &std::path::Path) -> Result<Self> {
        Ok(LossLog {
            file: std::io::BufWriter::new(std::fs::File::create(path)?),
        })
    }

    fn append(&mut self, breakdown: &LossBreakdown) -> Result<()> {
        let line =
            serde_json::to_string(breakdown).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(self.file, "{line}").map_err(Error::from)?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.file.flush().map_err(Error::from)
    }
}

fn mean_tables(tables: &[Vec<BTreeMap<usize, f64>>]) -> Vec<BTreeMap<usize, f64>> {
    if tables.is_empty() {
        return Vec::new();
    }
    let teachers = tables[0].len();
    let mut out: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); teachers];
    for table in tables {
        for (t, row) in table.iter().enumerate() {
            for (level, v) in row {
                *out[t].entry(*level).or_insert(0.0) += v / tables.len() as f64;
            }
        }
    }
    out
}

/// Stage 1: distillation-only pretraining.
pub fn stage1(resolved: &Resolved, options: GraphOptions) -> Result<TrainOutcome> {
    let cfg = &resolved.model;
    let model = StudentModel::init(cfg.clone())?;
    run_distill_loop(resolved, options, model.params)
}

fn run_distill_loop(
    resolved: &Resolved,
    options: GraphOptions,
    mut params: ParamSet,
) -> Result<TrainOutcome> {
    let cfg = &resolved.model;
    let steps = resolved.config.run.steps;
    let batch_size = resolved.config.run.batch_size;
    let seed = resolved.config.run.seed;
    let levels = crate::model::select_levels(cfg.depth)?;

    let mut optimizer = AdamW::new(&params, resolved.optimizer.weight_decay);
    let mut order = BatchOrder::new(
        resolved.dataset.train.len(),
        stream_rng(seed, Stream::DataOrder),
    );
    let mut teacher_feats = TeacherFeatures::new(resolved, levels.clone());
    let mut aug_rng = stream_rng(seed, Stream::Augment);
    let policy = augment_policy(resolved);
    let do_augment = resolved.dataset.config.augment;

    let mut log = LossLog::create(&resolved.run_dir.join("losses.jsonl"))?;
    let mut losses = Vec::with_capacity(steps);
    let mut last_good = params.clone();
    let ckpt_path = resolved.run_dir.join("checkpoint.sakc");

    for step in 0..steps {
        let snapshot = params.clone();
        let batch = order.next_batch(batch_size);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let mut total: Option<Var> = None;
        let mut tables = Vec::with_capacity(batch.len());
        for &idx in &batch {
            let sample = &resolved.dataset.train[idx];
            let image = if do_augment {
                augment(sample, &policy, &mut aug_rng).image
            } else {
                sample.image.clone()
            };
            let feats = features(&tape, &bound, cfg, &image, options.no_tsap)?;
            let students = aligned_students(&tape, &bound, cfg, &feats, options.no_tsap)?;
            let teachers = teacher_feats.for_image(idx, &image, !do_augment)?;
            let constants = teacher_constants(&teachers);
            let terms = distill_loss(&tape, &students, &constants, &resolved.config.distill)?;
            tables.push(terms.per_teacher_per_level);
            total = Some(match total {
                Some(acc) => tape.add(acc, terms.total),
                None => terms.total,
            });
        }
        let mean = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
        let loss_value = tape.scalar(mean);
        if !loss_value.is_finite() {
            checkpoint::save(&ckpt_path, cfg, seed, &last_good)?;
            log.finish()?;
            return Err(Error::numeric(format!(
                "diverged at step {step}; last good checkpoint written to {}",
                ckpt_path.display()
            )));
        }
        last_good = snapshot;

        let grads = tape.backward(mean);
        let named = collect_grads(&params, &bound, &grads);
        let lr = resolved.optimizer.lr_at(step, steps);
        optimizer.step(&mut params, &named, lr, resolved.optimizer.grad_clip);

        let breakdown = LossBreakdown {
            step,
            distill_total: loss_value,
            per_teacher_per_level: mean_tables(&tables),
            task_losses: BTreeMap::new(),
            grand_total: loss_value,
        };
        if step % resolved.config.run.log_every == 0 || step + 1 == steps {
            log.append(&breakdown)?;
        }
        losses.push(breakdown);
    }
    log.finish()?;

    checkpoint::save(&ckpt_path, cfg, seed, &params)?;
    let rep = distill_similarity(resolved, &params, options)?;
    std::fs::write(
        resolved.run_dir.join("rep_similarity.json"),
        serde_json::to_string_pretty(&rep).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    Ok(TrainOutcome {
        run_dir: resolved.run_dir.clone(),
        checkpoint_path: ckpt_path,
        losses,
        rep_similarity: Some(rep),
        final_val_task_loss: None,
    })
}

/// Cosine similarity between the aligned student features and every
/// teacher over the validation split.
pub fn distill_similarity(
    resolved: &Resolved,
    params: &ParamSet,
    options: GraphOptions,
) -> Result<RepSimilarity> {
    let cfg = &resolved.model;
    let levels = crate::model::select_levels(cfg.depth)?;
    let mut student_sets: Vec<BTreeMap<usize, Vec<TokenMap>>> =
        vec![BTreeMap::new(); cfg.num_teachers];
    let mut teacher_sets: Vec<BTreeMap<usize, Vec<TokenMap>>> =
        vec![BTreeMap::new(); cfg.num_teachers];

    for (vi, sample) in resolved.dataset.val.iter().enumerate() {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let feats = features(&tape, &bound, cfg, &sample.image, options.no_tsap)?;
        let students = aligned_students(&tape, &bound, cfg, &feats, options.no_tsap)?;
        let sample_index = resolved.dataset.train.len() + vi;
        let teachers = resolved
            .committee
            .forward(&sample.image, sample_index, &levels)?;
        for t in 0..cfg.num_teachers {
            let spec = &cfg.teacher_specs[t];
            for (&level, &var) in &students[t] {
                let tokens = tape.value2(var);
                student_sets[t]
                    .entry(level)
                    .or_default()
                    .push(TokenMap::new(tokens, spec.grid, level)?);
                teacher_sets[t]
                    .entry(level)
                    .or_default()
                    .push(teachers[t].get(level).unwrap().clone());
            }
        }
    }

    // concatenate the validation samples token-wise per level
    let fold = |sets: Vec<BTreeMap<usize, Vec<TokenMap>>>| -> Vec<MultiLevelFeatures> {
        sets.into_iter()
            .map(|levels| {
                let folded = levels
                    .into_iter()
                    .map(|(level, maps)| {
                        let total_rows: usize = maps.iter().map(|m| m.tokens.nrows()).sum();
                        let dim = maps[0].tokens.ncols();
                        let mut tokens = ndarray::Array2::<f64>::zeros((total_rows, dim));
                        let mut at = 0;
                        for m in &maps {
                            tokens
                                .slice_mut(ndarray::s![at..at + m.tokens.nrows(), ..])
                                .assign(&m.tokens);
                            at += m.tokens.nrows();
                        }
                        (
                            level,
                            TokenMap::new(tokens, crate::grid::Grid::new(1, total_rows), level)
                                .unwrap(),
                        )
                    })
                    .collect();
                MultiLevelFeatures::new(folded)
            })
            .collect()
    };
    rep_similarity(&fold(student_sets), &fold(teacher_sets))
}

/// Stage 2: joint multi-task training with the distillation term retained
/// (unless `gamma` is zeroed by the ablation).
pub fn stage2(
    resolved: &Resolved,
    options: GraphOptions,
    stage1_params: Option<&ParamSet>,
    gamma_override: Option<f64>,
) -> Result<TrainOutcome> {
    let cfg = &resolved.model;
    let steps = resolved.config.run.steps;
    let batch_size = resolved.config.run.batch_size;
    let seed = resolved.config.run.seed;
    let levels = crate::model::select_levels(cfg.depth)?;
    let gamma = gamma_override.unwrap_or(resolved.config.distill.gamma);
    let label_grid = crate::grid::Grid::new(cfg.image_size, cfg.image_size);

    let model = StudentModel::init(cfg.clone())?;
    let mut params = model.params;
    init_stage2_params(&mut params, cfg, options.fusion, options.no_tsap)?;
    if let Some(s1) = stage1_params {
        let copied = params.load_matching(s1);
        if copied == 0 {
            return Err(Error::config(
                "stage-1 checkpoint shares no parameters with this model",
            ));
        }
    }

    let mut optimizer = AdamW::new(&params, resolved.optimizer.weight_decay);
    let mut order = BatchOrder::new(
        resolved.dataset.train.len(),
        stream_rng(seed, Stream::DataOrder),
    );
    let mut teacher_feats = TeacherFeatures::new(resolved, levels.clone());
    let mut aug_rng = stream_rng(seed, Stream::Augment);
    let mut noise_rng = stream_rng(seed, Stream::RouterNoise);
    let policy = augment_policy(resolved);
    let do_augment = resolved.dataset.config.augment;
    let noise_on = resolved.config.run.router_noise;

    let mut log = LossLog::create(&resolved.run_dir.join("losses.jsonl"))?;
    let mut losses = Vec::with_capacity(steps);
    let mut last_good = params.clone();
    let ckpt_path = resolved.run_dir.join("checkpoint.sakc");

    for step in 0..steps {
        let snapshot = params.clone();
        let batch = order.next_batch(batch_size);
        let tape = Tape::new();
        let bound = params.bind(&tape);

        let mut distill_total: Option<Var> = None;
        let mut tables = Vec::with_capacity(batch.len());
        let mut passes = Vec::with_capacity(batch.len());
        let mut label_refs = Vec::with_capacity(batch.len());
        let mut augmented = Vec::with_capacity(batch.len());
        for &idx in &batch {
            let sample = &resolved.dataset.train[idx];
            let sample = if do_augment {
                augment(sample, &policy, &mut aug_rng)
            } else {
                sample.clone()
            };
            augmented.push((idx, sample));
        }
        for (idx, sample) in &augmented {
            let feats = features(&tape, &bound, cfg, &sample.image, options.no_tsap)?;
            if gamma > 0.0 {
                let students = aligned_students(&tape, &bound, cfg, &feats, options.no_tsap)?;
                let teachers = teacher_feats.for_image(*idx, &sample.image, !do_augment)?;
                let constants = teacher_constants(&teachers);
                let terms =
                    distill_loss(&tape, &students, &constants, &resolved.config.distill)?;
                tables.push(terms.per_teacher_per_level);
                distill_total = Some(match distill_total {
                    Some(acc) => tape.add(acc, terms.total),
                    None => terms.total,
                });
            }
            let pass = forward::task_forward(
                &tape,
                &bound,
                cfg,
                &feats,
                options,
                if noise_on { Some(&mut noise_rng) } else { None },
                label_grid,
            )?;
            passes.push(pass);
            label_refs.push(&sample.labels);
        }

        let task_losses = batch_task_losses(&tape, &cfg.task_specs, &passes, &label_refs)?;
        let distill_mean = distill_total
            .map(|total| tape.scale(total, 1.0 / batch.len() as f64));

        let mut grand = match distill_mean {
            Some(d) => tape.scale(d, gamma),
            None => tape.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[]))),
        };
        for spec in &cfg.task_specs {
            let weighted = tape.scale(task_losses[&spec.name], spec.weight());
            grand = tape.add(grand, weighted);
        }

        let grand_value = tape.scalar(grand);
        if !grand_value.is_finite() {
            checkpoint::save(&ckpt_path, cfg, seed, &last_good)?;
            log.finish()?;
            return Err(Error::numeric(format!(
                "diverged at step {step}; last good checkpoint written to {}",
                ckpt_path.display()
            )));
        }
        last_good = snapshot;

        let grads = tape.backward(grand);
        let named = collect_grads(&params, &bound, &grads);
        let lr = resolved.optimizer.lr_at(step, steps);
        optimizer.step(&mut params, &named, lr, resolved.optimizer.grad_clip);

        let breakdown = LossBreakdown {
            step,
            distill_total: distill_mean.map(|d| tape.scalar(d)).unwrap_or(0.0),
            per_teacher_per_level: mean_tables(&tables),
            task_losses: task_losses
                .iter()
                .map(|(name, var)| (name.clone(), tape.scalar(*var)))
                .collect(),
            grand_total: grand_value,
        };
        breakdown.check_identity(gamma, &cfg.task_specs)?;
        if step % resolved.config.run.log_every == 0 || step + 1 == steps {
            log.append(&breakdown)?;
        }
        losses.push(breakdown);
    }
    log.finish()?;

    checkpoint::save(&ckpt_path, cfg, seed, &params)?;
    let val_loss = validation_task_loss(&params, cfg, &resolved.dataset.val, options)?;
    let gate_rows = gate_report_rows(&params, cfg, &resolved.dataset.val, options)?;
    let mut gate_file = std::fs::File::create(resolved.run_dir.join("gates.csv"))?;
    crate::router::write_gate_csv(&gate_rows, &mut gate_file)?;

    Ok(TrainOutcome {
        run_dir: resolved.run_dir.clone(),
        checkpoint_path: ckpt_path,
        losses,
        rep_similarity: None,
        final_val_task_loss: Some(val_loss.weighted_total),
    })
}
