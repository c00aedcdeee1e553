//! Checkpoint evaluation: task metrics, gate summaries, validation loss,
//! and the multi-task gain against a provided single-task baseline.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::ModelConfig;
use crate::params::ParamSet;
use crate::pipeline::forward::{batch_task_losses, features, task_forward, GraphOptions};
use crate::router::GateReportRow;
use crate::tape::Tape;
use crate::tasks::heads::rows_to_chw;
use crate::tasks::loss::Label;
use crate::tasks::metrics::{
    bias_report, delta_m, directions_from_specs, BiasReport,
    BoundaryAccumulator, MaxFAccumulator, TaskDirection,
};
use crate::tasks::{MetricRow, TaskKind, TaskSpec};

/// Per-task and weighted validation losses (noise off, no augmentation).
pub struct ValLoss {
    pub per_task: BTreeMap<String, f64>,
    pub weighted_total: f64,
}

pub fn validation_task_loss(
    params: &ParamSet,
    cfg: &ModelConfig,
    samples: &[crate::data::Sample],
    options: GraphOptions,
) -> Result<ValLoss> {
    if samples.is_empty() {
        return Err(Error::config("validation split is empty"));
    }
    let label_grid = Grid::new(cfg.image_size, cfg.image_size);
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let mut passes = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for sample in samples {
        let feats = features(&tape, &bound, cfg, &sample.image, options.no_tsap)?;
        passes.push(task_forward(
            &tape, &bound, cfg, &feats, options, None, label_grid,
        )?);
        labels.push(&sample.labels);
    }
    let task_losses = batch_task_losses(&tape, &cfg.task_specs, &passes, &labels)?;
    let per_task: BTreeMap<String, f64> = task_losses
        .iter()
        .map(|(name, var)| (name.clone(), tape.scalar(*var)))
        .collect();
    let weighted_total = cfg
        .task_specs
        .iter()
        .map(|s| s.weight() * per_task[&s.name])
        .sum();
    Ok(ValLoss {
        per_task,
        weighted_total,
    })
}

/// Mean gate weights per (task, level) over a sample set, noise off.
pub fn gate_report_rows(
    params: &ParamSet,
    cfg: &ModelConfig,
    samples: &[crate::data::Sample],
    options: GraphOptions,
) -> Result<Vec<GateReportRow>> {
    let label_grid = Grid::new(cfg.image_size, cfg.image_size);
    let mut sums: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    let mut count = 0usize;
    for sample in samples {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let feats = features(&tape, &bound, cfg, &sample.image, options.no_tsap)?;
        let pass = task_forward(&tape, &bound, cfg, &feats, options, None, label_grid)?;
        for (key, gates) in pass.gates {
            let slot = sums.entry(key).or_insert_with(|| vec![0.0; gates.len()]);
            for (s, g) in slot.iter_mut().zip(&gates) {
                *s += g;
            }
        }
        count += 1;
    }
    let mut rows = Vec::new();
    for ((task, level), sum) in sums {
        for (expert_id, total) in sum.iter().enumerate() {
            rows.push(GateReportRow {
                task: task.clone(),
                level,
                expert_id,
                mean_weight: total / count.max(1) as f64,
            });
        }
    }
    Ok(rows)
}

/// Full evaluation report.
#[derive(Serialize)]
pub struct EvalReport {
    pub metrics: Vec<MetricRow>,
    pub val_loss_per_task: BTreeMap<String, f64>,
    pub val_loss_weighted: f64,
    pub delta_m: Option<f64>,
    pub bias: Option<BiasReport>,
    #[serde(skip)]
    pub gate_rows: Vec<GateReportRow>,
}

/// Dataset-level metric accumulation for one task.
enum Accumulator {
    Miou {
        inter: Vec<usize>,
        union: Vec<usize>,
    },
    MaxF(MaxFAccumulator),
    Boundary(BoundaryAccumulator),
    Angle { total: f64, count: usize },
    Square { total: f64, count: usize },
}

impl Accumulator {
    fn for_task(spec: &TaskSpec) -> Self {
        match spec.kind {
            TaskKind::Semseg | TaskKind::Parsing => Accumulator::Miou {
                inter: vec![0; spec.num_classes],
                union: vec![0; spec.num_classes],
            },
            TaskKind::Saliency => Accumulator::MaxF(MaxFAccumulator::new()),
            TaskKind::Boundary => Accumulator::Boundary(BoundaryAccumulator::new()),
            TaskKind::Normal => Accumulator::Angle {
                total: 0.0,
                count: 0,
            },
            TaskKind::Depth => Accumulator::Square {
                total: 0.0,
                count: 0,
            },
        }
    }

    fn value(&self, spec: &TaskSpec) -> Result<f64> {
        match self {
            Accumulator::Miou { inter, union } => {
                let mut total = 0.0;
                let mut present = 0;
                for (i, u) in inter.iter().zip(union) {
                    if *u > 0 {
                        total += *i as f64 / *u as f64;
                        present += 1;
                    }
                }
                if present == 0 {
                    return Err(Error::numeric(format!("{}: no class present", spec.name)));
                }
                Ok(100.0 * total / present as f64)
            }
            Accumulator::MaxF(acc) => acc
                .max_f()
                .ok_or_else(|| Error::numeric(format!("{}: no positive pixels", spec.name))),
            Accumulator::Boundary(acc) => acc
                .best_f()
                .ok_or_else(|| Error::numeric(format!("{}: no positive pixels", spec.name))),
            Accumulator::Angle { total, count } => {
                if *count == 0 {
                    return Err(Error::numeric(format!("{}: no valid pixels", spec.name)));
                }
                Ok(total / *count as f64)
            }
            Accumulator::Square { total, count } => {
                if *count == 0 {
                    return Err(Error::numeric(format!("{}: no valid pixels", spec.name)));
                }
                Ok((total / *count as f64).sqrt())
            }
        }
    }
}

fn prob_plane(rows: &Array2<f64>, grid: Grid) -> Array2<f64> {
    Array2::from_shape_fn((grid.h, grid.w), |(y, x)| rows[[y * grid.w + x, 0]])
}

fn argmax_plane(rows: &Array2<f64>, grid: Grid) -> Array2<u16> {
    Array2::from_shape_fn((grid.h, grid.w), |(y, x)| {
        let row = rows.row(y * grid.w + x);
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (k, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        best as u16
    })
}

fn unit_vectors(rows: &Array2<f64>, grid: Grid) -> Array3<f64> {
    let mut chw = rows_to_chw(rows, grid);
    let (c, h, w) = chw.dim();
    for y in 0..h {
        for x in 0..w {
            let norm: f64 = (0..c)
                .map(|ch| chw[[ch, y, x]] * chw[[ch, y, x]])
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            for ch in 0..c {
                chw[[ch, y, x]] /= norm;
            }
        }
    }
    chw
}

/// Evaluate a checkpointed model on a sample set. `baseline` rows, when
/// provided, feed the multi-task gain and the bias report.
pub fn evaluate(
    params: &ParamSet,
    cfg: &ModelConfig,
    samples: &[crate::data::Sample],
    options: GraphOptions,
    baseline: Option<&[MetricRow]>,
) -> Result<EvalReport> {
    if cfg.task_specs.is_empty() {
        return Err(Error::config("checkpoint declares no tasks"));
    }
    let label_grid = Grid::new(cfg.image_size, cfg.image_size);
    let mut accs: BTreeMap<String, Accumulator> = cfg
        .task_specs
        .iter()
        .map(|s| (s.name.clone(), Accumulator::for_task(s)))
        .collect();

    for sample in samples {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let feats = features(&tape, &bound, cfg, &sample.image, options.no_tsap)?;
        let pass = task_forward(&tape, &bound, cfg, &feats, options, None, label_grid)?;
        for spec in &cfg.task_specs {
            let rows = tape.value2(pass.preds[&spec.name]);
            let label = sample.labels.get(&spec.name).ok_or_else(|| {
                Error::config(format!("dataset lacks labels for task {}", spec.name))
            })?;
            match (accs.get_mut(&spec.name).unwrap(), label) {
                (Accumulator::Miou { inter, union }, Label::Classes(gt)) => {
                    let pred = argmax_plane(&rows, label_grid);
                    for (&p, &g) in pred.iter().zip(gt.iter()) {
                        if g == crate::tasks::loss::IGNORE_LABEL {
                            continue;
                        }
                        let (p, g) = (p as usize, g as usize);
                        if p == g {
                            inter[p] += 1;
                            union[p] += 1;
                        } else {
                            union[p] += 1;
                            union[g] += 1;
                        }
                    }
                }
                (Accumulator::MaxF(acc), Label::Binary(gt)) => {
                    acc.add_image(&prob_plane(&rows, label_grid), gt)?;
                }
                (Accumulator::Boundary(acc), Label::Binary(gt)) => {
                    acc.add_image(&prob_plane(&rows, label_grid), gt)?;
                }
                (Accumulator::Angle { total, count }, Label::Vector(gt)) => {
                    let pred = unit_vectors(&rows, label_grid);
                    // accumulate the per-pixel angles dataset-wide
                    let (c, h, w) = gt.dim();
                    for y in 0..h {
                        for x in 0..w {
                            let mag: f64 =
                                (0..c).map(|ch| gt[[ch, y, x]] * gt[[ch, y, x]]).sum();
                            if mag == 0.0 {
                                continue;
                            }
                            let dot: f64 =
                                (0..c).map(|ch| pred[[ch, y, x]] * gt[[ch, y, x]]).sum();
                            *total += dot.clamp(-1.0, 1.0).acos().to_degrees();
                            *count += 1;
                        }
                    }
                }
                (Accumulator::Square { total, count }, Label::Scalar(gt)) => {
                    let pred = prob_plane(&rows, label_grid);
                    for (&p, &g) in pred.iter().zip(gt.iter()) {
                        if g <= 0.0 {
                            continue;
                        }
                        *total += (p - g) * (p - g);
                        *count += 1;
                    }
                }
                _ => {
                    return Err(Error::config(format!(
                        "label kind does not match task {}",
                        spec.name
                    )))
                }
            }
        }
    }

    let mut metrics = Vec::new();
    for spec in &cfg.task_specs {
        metrics.push(MetricRow {
            task: spec.name.clone(),
            metric: spec.kind.metric_name().to_string(),
            value: accs[&spec.name].value(spec)?,
        });
    }

    let val = validation_task_loss(params, cfg, samples, options)?;
    let gate_rows = gate_report_rows(params, cfg, samples, options)?;

    let directions = directions_from_specs(&cfg.task_specs);
    let (dm, bias) = match baseline {
        Some(rows) => (
            Some(delta_m(&metrics, rows, &directions)?),
            Some(bias_report(&metrics, rows, &directions)?),
        ),
        None => (None, None),
    };

    Ok(EvalReport {
        metrics,
        val_loss_per_task: val.per_task,
        val_loss_weighted: val.weighted_total,
        delta_m: dm,
        bias,
        gate_rows,
    })
}

/// Write the metric rows as `task,metric,value` CSV.
pub fn write_metrics_csv<W: std::io::Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Read metric rows from `task,metric,value` CSV.
pub fn read_metrics_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricRow>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for record in reader.deserialize::<MetricRow>() {
        rows.push(record.map_err(|e| Error::Format(format!("bad metrics csv: {e}")))?);
    }
    if rows.is_empty() {
        return Err(Error::Format("metrics csv has no rows".into()));
    }
    Ok(rows)
}

/// Infer metric directions from names: mErr and RMSE improve downward.
pub fn infer_directions(rows: &[MetricRow], lower_override: &[String]) -> Vec<TaskDirection> {
    rows.iter()
        .map(|r| {
            let lower = if lower_override.is_empty() {
                matches!(r.metric.to_ascii_lowercase().as_str(), "merr" | "rmse")
            } else {
                lower_override.iter().any(|t| t == &r.task)
            };
            TaskDirection {
                task: r.task.clone(),
                lower_is_better: lower,
            }
        })
        .collect()
}
