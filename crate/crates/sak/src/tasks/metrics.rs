//! Metric suite: mIoU, maximum F-measure, boundary F at the dataset-best
//! threshold, mean angular error, RMSE, the multi-task gain, and the
//! bias-analysis arithmetic.
//!
//! The boundary metric is a simplified stand-in for the classical
//! optimal-dataset-scale F: predicted boundary pixels greedily match
//! ground-truth pixels within a Chebyshev radius of
//! `max(1, round(0.0075 * image diagonal))`, and the threshold is chosen
//! dataset-wide. Values are not comparable to implementations built on
//! exact bipartite matching.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::MultiLevelFeatures;
use crate::tasks::{MetricRow, TaskKind, TaskSpec};
use crate::tasks::loss::{Label, IGNORE_LABEL};

/// Number of thresholds swept for maxF and boundary F.
pub const NUM_THRESHOLDS: usize = 256;
/// F-measure beta^2 for saliency, following the saliency convention.
pub const SALIENCY_BETA_SQ: f64 = 0.3;
/// Boundary tolerance as a fraction of the image diagonal.
pub const BOUNDARY_TOL_FRAC: f64 = 0.0075;

/// Mean intersection-over-union in percent. Classes absent from both
/// prediction and ground truth are skipped; 255 marks ignored pixels.
pub fn miou(pred: &Array2<u16>, gt: &Array2<u16>, num_classes: usize) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::config("miou: shape mismatch"));
    }
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if g == IGNORE_LABEL {
            continue;
        }
        let (p, g) = (p as usize, g as usize);
        if g >= num_classes || p >= num_classes {
            return Err(Error::config(format!(
                "miou: class out of range (pred {p}, gt {g})"
            )));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let mut total = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        if union[c] > 0 {
            total += inter[c] as f64 / union[c] as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::numeric("miou: no class present"));
    }
    Ok(100.0 * total / present as f64)
}

fn f_measure(tp: f64, fp: f64, fn_: f64, beta_sq: f64) -> f64 {
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall)
}

/// Dataset-level accumulator for the threshold sweep of maxF.
#[derive(Debug, Clone)]
pub struct MaxFAccumulator {
    tp: Vec<f64>,
    fp: Vec<f64>,
    fn_: Vec<f64>,
    any_positive: bool,
}

impl Default for MaxFAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

impl MaxFAccumulator {
    pub fn new() -> Self {
        MaxFAccumulator {
            tp: vec![0.0; NUM_THRESHOLDS],
            fp: vec![0.0; NUM_THRESHOLDS],
            fn_: vec![0.0; NUM_THRESHOLDS],
            any_positive: false,
        }
    }

    /// Add one image. Returns false (and skips it) when the ground truth
    /// has no positive pixel — the undefined-row convention.
    pub fn add_image(&mut self, prob: &Array2<f64>, gt: &Array2<u16>) -> Result<bool> {
        if prob.dim() != gt.dim() {
            return Err(Error::config("maxF: shape mismatch"));
        }
        let (pos, _) = super::loss::binary_counts(gt);
        if pos == 0 {
            return Ok(false);
        }
        self.any_positive = true;
        for (k, threshold) in thresholds().enumerate() {
            let mut tp = 0.0;
            let mut fp = 0.0;
            let mut fn_ = 0.0;
            for (&p, &g) in prob.iter().zip(gt.iter()) {
                if g == IGNORE_LABEL {
                    continue;
                }
                let hit = p >= threshold;
                match (hit, g == 1) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fn_ += 1.0,
                    (false, false) => {}
                }
            }
            self.tp[k] += tp;
            self.fp[k] += fp;
            self.fn_[k] += fn_;
        }
        Ok(true)
    }

    /// The sweep maximum of F_beta, in percent.
    pub fn max_f(&self) -> Option<f64> {
        if !self.any_positive {
            return None;
        }
        let best = (0..NUM_THRESHOLDS)
            .map(|k| f_measure(self.tp[k], self.fp[k], self.fn_[k], SALIENCY_BETA_SQ))
            .fold(0.0, f64::max);
        Some(100.0 * best)
    }

    /// F_beta at one threshold index, in percent (for the monotone-safety
    /// property).
    pub fn f_at(&self, k: usize) -> f64 {
        100.0 * f_measure(self.tp[k], self.fp[k], self.fn_[k], SALIENCY_BETA_SQ)
    }
}

pub fn thresholds() -> impl Iterator<Item = f64> {
    (0..NUM_THRESHOLDS).map(|k| k as f64 / (NUM_THRESHOLDS - 1) as f64)
}

/// Matching radius for boundary evaluation on an `h x w` image.
pub fn boundary_radius(h: usize, w: usize) -> usize {
    let diag = ((h * h + w * w) as f64).sqrt();
    ((BOUNDARY_TOL_FRAC * diag).round() as usize).max(1)
}

/// Dataset-level accumulator for the simplified boundary F.
#[derive(Debug, Clone)]
pub struct BoundaryAccumulator {
    tp: Vec<f64>,
    fp: Vec<f64>,
    fn_: Vec<f64>,
    any_positive: bool,
}

impl Default for BoundaryAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

impl BoundaryAccumulator {
    pub fn new() -> Self {
        BoundaryAccumulator {
            tp: vec![0.0; NUM_THRESHOLDS],
            fp: vec![0.0; NUM_THRESHOLDS],
            fn_: vec![0.0; NUM_THRESHOLDS],
            any_positive: false,
        }
    }

    /// Add one image: greedy tolerance matching at every threshold.
    /// Ground truths without a positive pixel are skipped (undefined row).
    pub fn add_image(&mut self, prob: &Array2<f64>, gt: &Array2<u16>) -> Result<bool> {
        if prob.dim() != gt.dim() {
            return Err(Error::config("boundaryF: shape mismatch"));
        }
        let (h, w) = gt.dim();
        let gt_pixels: Vec<(usize, usize)> = iter_positions(h, w)
            .filter(|&(y, x)| gt[[y, x]] == 1)
            .collect();
        if gt_pixels.is_empty() {
            return Ok(false);
        }
        self.any_positive = true;
        let radius = boundary_radius(h, w) as isize;
        for (k, threshold) in thresholds().enumerate() {
            let pred_pixels: Vec<(usize, usize)> = iter_positions(h, w)
                .filter(|&(y, x)| gt[[y, x]] != IGNORE_LABEL && prob[[y, x]] >= threshold)
                .collect();
            let mut gt_used = Array2::<bool>::from_elem((h, w), false);
            let mut tp = 0.0;
            let mut fp = 0.0;
            for &(py, px) in &pred_pixels {
                // nearest unused ground-truth pixel within the Chebyshev
                // radius, scanned in fixed order for determinism
                let mut matched = false;
                'search: for r in 0..=radius {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            if dy.abs().max(dx.abs()) != r {
                                continue;
                            }
                            let gy = py as isize + dy;
                            let gx = px as isize + dx;
                            if gy < 0 || gy >= h as isize || gx < 0 || gx >= w as isize {
                                continue;
                            }
                            let (gy, gx) = (gy as usize, gx as usize);
                            if gt[[gy, gx]] == 1 && !gt_used[[gy, gx]] {
                                gt_used[[gy, gx]] = true;
                                matched = true;
                                break 'search;
                            }
                        }
                    }
                }
                if matched {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
            let matched_gt = gt_used.iter().filter(|&&u| u).count() as f64;
            let fn_ = gt_pixels.len() as f64 - matched_gt;
            self.tp[k] += tp;
            self.fp[k] += fp;
            self.fn_[k] += fn_;
        }
        Ok(true)
    }

    /// Best F1 over the dataset-wide threshold sweep, in percent.
    pub fn best_f(&self) -> Option<f64> {
        if !self.any_positive {
            return None;
        }
        let best = (0..NUM_THRESHOLDS)
            .map(|k| f_measure(self.tp[k], self.fp[k], self.fn_[k], 1.0))
            .fold(0.0, f64::max);
        Some(100.0 * best)
    }
}

fn iter_positions(h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..h).flat_map(move |y| (0..w).map(move |x| (y, x)))
}

/// Mean angular error in degrees between unit-vector maps, over pixels
/// with valid (nonzero) ground truth.
pub fn mean_angular_error(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::config("mErr: shape mismatch"));
    }
    let (c, h, w) = gt.dim();
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let mag: f64 = (0..c).map(|ch| gt[[ch, y, x]] * gt[[ch, y, x]]).sum();
            if mag == 0.0 {
                continue;
            }
            let dot: f64 = (0..c).map(|ch| pred[[ch, y, x]] * gt[[ch, y, x]]).sum();
            total += dot.clamp(-1.0, 1.0).acos().to_degrees();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::numeric("mErr: no valid pixels"));
    }
    Ok(total / count as f64)
}

/// Root-mean-square error over pixels with positive ground truth.
pub fn rmse(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::config("rmse: shape mismatch"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if g <= 0.0 {
            continue;
        }
        total += (p - g) * (p - g);
        count += 1;
    }
    if count == 0 {
        return Err(Error::numeric("rmse: no valid pixels"));
    }
    Ok((total / count as f64).sqrt())
}

/// Single-image metric dispatch. Predictions: hard classes for
/// segmentation, probabilities for saliency/boundary, unit vectors for
/// normals, raw values for depth.
pub enum Prediction {
    Classes(Array2<u16>),
    Probability(Array2<f64>),
    Vectors(Array3<f64>),
    Values(Array2<f64>),
}

pub fn metric(pred: &Prediction, gt: &Label, spec: &TaskSpec) -> Result<MetricRow> {
    let value = match (spec.kind, pred, gt) {
        (TaskKind::Semseg | TaskKind::Parsing, Prediction::Classes(p), Label::Classes(g)) => {
            miou(p, g, spec.num_classes)?
        }
        (TaskKind::Saliency, Prediction::Probability(p), Label::Binary(g)) => {
            let mut acc = MaxFAccumulator::new();
            acc.add_image(p, g)?;
            acc.max_f()
                .ok_or_else(|| Error::numeric("maxF undefined: empty ground truth"))?
        }
        (TaskKind::Boundary, Prediction::Probability(p), Label::Binary(g)) => {
            let mut acc = BoundaryAccumulator::new();
            acc.add_image(p, g)?;
            acc.best_f()
                .ok_or_else(|| Error::numeric("boundaryF undefined: empty ground truth"))?
        }
        (TaskKind::Normal, Prediction::Vectors(p), Label::Vector(g)) => {
            mean_angular_error(p, g)?
        }
        (TaskKind::Depth, Prediction::Values(p), Label::Scalar(g)) => rmse(p, g)?,
        _ => {
            return Err(Error::config(format!(
                "metric: prediction/label kinds do not match task {}",
                spec.name
            )))
        }
    };
    Ok(MetricRow {
        task: spec.name.clone(),
        metric: spec.kind.metric_name().to_string(),
        value,
    })
}

// ---- multi-task gain and bias analysis --------------------------------------

/// Metric direction for one task.
#[derive(Debug, Clone)]
pub struct TaskDirection {
    pub task: String,
    pub lower_is_better: bool,
}

pub fn directions_from_specs(specs: &[TaskSpec]) -> Vec<TaskDirection> {
    specs
        .iter()
        .map(|s| TaskDirection {
            task: s.name.clone(),
            lower_is_better: s.lower_better(),
        })
        .collect()
}

fn find_value(rows: &[MetricRow], task: &str) -> Result<f64> {
    rows.iter()
        .find(|r| r.task == task)
        .map(|r| r.value)
        .ok_or_else(|| Error::config(format!("missing metric row for task {task}")))
}

/// Multi-task gain in percent: the mean over tasks of the signed relative
/// difference to the single-task baseline, with the sign flipped for
/// lower-is-better metrics.
pub fn delta_m(
    multi: &[MetricRow],
    single: &[MetricRow],
    directions: &[TaskDirection],
) -> Result<f64> {
    if directions.is_empty() {
        return Err(Error::config("delta_m: no tasks"));
    }
    let mut total = 0.0;
    for dir in directions {
        let m = find_value(multi, &dir.task)?;
        let s = find_value(single, &dir.task)?;
        if s == 0.0 {
            return Err(Error::numeric(format!(
                "delta_m: zero baseline for task {}",
                dir.task
            )));
        }
        let sign = if dir.lower_is_better { -1.0 } else { 1.0 };
        total += sign * (m - s) / s;
    }
    Ok(100.0 * total / directions.len() as f64)
}

/// Per-task relative improvements plus their mean, population standard
/// deviation, and consistency ratio mu/sigma (None when sigma is zero).
#[derive(Debug, Clone, Serialize)]
pub struct BiasReport {
    pub per_task_relative_improvement: BTreeMap<String, f64>,
    pub mu: f64,
    pub sigma: f64,
    pub mu_over_sigma: Option<f64>,
}

pub fn bias_report(
    model_rows: &[MetricRow],
    baseline_rows: &[MetricRow],
    directions: &[TaskDirection],
) -> Result<BiasReport> {
    if directions.is_empty() {
        return Err(Error::config("bias_report: no tasks"));
    }
    let mut improvements = BTreeMap::new();
    for dir in directions {
        let m = find_value(model_rows, &dir.task)?;
        let b = find_value(baseline_rows, &dir.task)?;
        if b == 0.0 {
            return Err(Error::numeric(format!(
                "bias_report: zero baseline for task {}",
                dir.task
            )));
        }
        let sign = if dir.lower_is_better { -1.0 } else { 1.0 };
        improvements.insert(dir.task.clone(), 100.0 * sign * (m - b) / b);
    }
    let n = improvements.len() as f64;
    let mu = improvements.values().sum::<f64>() / n;
    let sigma =
        (improvements.values().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
    let ratio = if sigma == 0.0 { None } else { Some(mu / sigma) };
    Ok(BiasReport {
        per_task_relative_improvement: improvements,
        mu,
        sigma,
        mu_over_sigma: ratio,
    })
}

/// Average cosine similarity between aligned student and teacher features:
/// mean over tokens and levels per teacher, plus the mean over teachers.
#[derive(Debug, Clone, Serialize)]
pub struct RepSimilarity {
    pub per_teacher: Vec<f64>,
    pub average: f64,
}

pub fn rep_similarity(
    students: &[MultiLevelFeatures],
    teachers: &[MultiLevelFeatures],
) -> Result<RepSimilarity> {
    if students.len() != teachers.len() || students.is_empty() {
        return Err(Error::config("rep_similarity: teacher count mismatch"));
    }
    let mut per_teacher = Vec::with_capacity(students.len());
    for (i, (s, t)) in students.iter().zip(teachers.iter()).enumerate() {
        let mut total = 0.0;
        let mut count = 0usize;
        for (level, smap) in &s.levels {
            let tmap = t.get(*level).ok_or_else(|| {
                Error::LevelMismatch(format!("teacher {i} missing level {level}"))
            })?;
            if smap.tokens.raw_dim() != tmap.tokens.raw_dim() {
                return Err(Error::config(format!(
                    "rep_similarity: teacher {i} level {level} shape mismatch"
                )));
            }
            for (srow, trow) in smap.tokens.rows().into_iter().zip(tmap.tokens.rows()) {
                let sn = srow.iter().map(|v| v * v).sum::<f64>().sqrt();
                let tn = trow.iter().map(|v| v * v).sum::<f64>().sqrt();
                if sn == 0.0 || tn == 0.0 {
                    return Err(Error::numeric(format!(
                        "rep_similarity: zero-norm token (teacher {i}, level {level})"
                    )));
                }
                let dot: f64 = srow.iter().zip(trow.iter()).map(|(a, b)| a * b).sum();
                total += dot / (sn * tn);
                count += 1;
            }
        }
        per_teacher.push(total / count as f64);
    }
    let average = per_teacher.iter().sum::<f64>() / per_teacher.len() as f64;
    Ok(RepSimilarity {
        per_teacher,
        average,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn miou_perfect_and_enumerated_case() {
        let gt = array![[0u16, 1], [1, 1]];
        assert!((miou(&gt, &gt, 2).unwrap() - 100.0).abs() < 1e-12);

        // pred [0,0,1,1] vs gt [0,1,1,1]: IoU0 = 1/2, IoU1 = 2/3
        let pred = array![[0u16, 0], [1, 1]];
        let expected = 100.0 * (0.5 + 2.0 / 3.0) / 2.0;
        assert!((miou(&pred, &gt, 2).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn miou_matches_brute_force_on_all_2x4_binary_masks() {
        // oracle: direct per-class intersection / union enumeration
        fn oracle(pred: &[u16; 8], gt: &[u16; 8]) -> f64 {
            let mut ious = Vec::new();
            for c in 0..2u16 {
                let inter = pred
                    .iter()
                    .zip(gt.iter())
                    .filter(|(p, g)| **p == c && **g == c)
                    .count();
                let uni = pred
                    .iter()
                    .zip(gt.iter())
                    .filter(|(p, g)| **p == c || **g == c)
                    .count();
                if uni > 0 {
                    ious.push(inter as f64 / uni as f64);
                }
            }
            100.0 * ious.iter().sum::<f64>() / ious.len() as f64
        }
        for p_bits in 0..256u32 {
            for g_bits in 0..256u32 {
                let mut p = [0u16; 8];
                let mut g = [0u16; 8];
                for k in 0..8 {
                    p[k] = ((p_bits >> k) & 1) as u16;
                    g[k] = ((g_bits >> k) & 1) as u16;
                }
                let pa = Array2::from_shape_vec((2, 4), p.to_vec()).unwrap();
                let ga = Array2::from_shape_vec((2, 4), g.to_vec()).unwrap();
                let got = miou(&pa, &ga, 2).unwrap();
                let want = oracle(&p, &g);
                assert!((got - want).abs() < 1e-9, "pred {p:?} gt {g:?}");
            }
        }
    }

    #[test]
    fn merr_analytic_angles() {
        let h = 2;
        let w = 2;
        let mut gt = Array3::<f64>::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                gt[[2, y, x]] = 1.0;
            }
        }
        // parallel
        assert!((mean_angular_error(&gt, &gt).unwrap() - 0.0).abs() < 1e-12);
        // perpendicular
        let mut perp = Array3::<f64>::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                perp[[0, y, x]] = 1.0;
            }
        }
        assert!((mean_angular_error(&perp, &gt).unwrap() - 90.0).abs() < 1e-12);
        // antipodal
        let anti = gt.mapv(|v| -v);
        assert!((mean_angular_error(&anti, &gt).unwrap() - 180.0).abs() < 1e-12);
    }

    #[test]
    fn rmse_zero_on_match_and_masks_invalid() {
        let gt = array![[1.0, 2.0], [0.0, 3.0]];
        assert_eq!(rmse(&gt, &gt).unwrap(), 0.0);
        let mut pred = gt.clone();
        pred[[1, 0]] = 99.0; // invalid in gt, must be ignored
        assert_eq!(rmse(&pred, &gt).unwrap(), 0.0);
    }

    #[test]
    fn maxf_sweep_dominates_single_thresholds() {
        let prob = Array2::from_shape_fn((8, 8), |(y, x)| ((y * 8 + x) as f64) / 63.0);
        let gt = Array2::from_shape_fn((8, 8), |(y, x)| u16::from((y + x) % 3 == 0));
        let mut acc = MaxFAccumulator::new();
        assert!(acc.add_image(&prob, &gt).unwrap());
        let best = acc.max_f().unwrap();
        for k in (0..NUM_THRESHOLDS).step_by(17) {
            assert!(best >= acc.f_at(k) - 1e-12);
        }
    }

    #[test]
    fn empty_ground_truth_rows_are_excluded() {
        let prob = Array2::from_elem((4, 4), 0.9);
        let gt = Array2::<u16>::zeros((4, 4));
        let mut acc = MaxFAccumulator::new();
        assert!(!acc.add_image(&prob, &gt).unwrap());
        assert!(acc.max_f().is_none());
        let mut bacc = BoundaryAccumulator::new();
        assert!(!bacc.add_image(&prob, &gt).unwrap());
        assert!(bacc.best_f().is_none());
    }

    #[test]
    fn boundary_f_perfect_prediction() {
        let mut gt = Array2::<u16>::zeros((16, 16));
        for x in 0..16 {
            gt[[8, x]] = 1;
        }
        let prob = gt.mapv(|v| v as f64);
        let mut acc = BoundaryAccumulator::new();
        acc.add_image(&prob, &gt).unwrap();
        assert!((acc.best_f().unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn boundary_f_tolerates_small_offsets() {
        let mut gt = Array2::<u16>::zeros((16, 16));
        let mut prob = Array2::<f64>::zeros((16, 16));
        for x in 0..16 {
            gt[[8, x]] = 1;
            prob[[9, x]] = 1.0; // one pixel off, within radius 1
        }
        let mut acc = BoundaryAccumulator::new();
        acc.add_image(&prob, &gt).unwrap();
        assert!((acc.best_f().unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn boundary_radius_formula() {
        assert_eq!(boundary_radius(16, 16), 1); // 0.0075 * 22.6 rounds to 0 -> floor 1
        assert_eq!(boundary_radius(512, 512), 5); // 0.0075 * 724.1 = 5.4 -> 5
    }

    fn rows(vals: &[(&str, f64)]) -> Vec<MetricRow> {
        vals.iter()
            .map(|(t, v)| MetricRow {
                task: t.to_string(),
                metric: "m".into(),
                value: *v,
            })
            .collect()
    }

    fn dirs(names: &[&str], lower: &[&str]) -> Vec<TaskDirection> {
        names
            .iter()
            .map(|n| TaskDirection {
                task: n.to_string(),
                lower_is_better: lower.contains(n),
            })
            .collect()
    }

    #[test]
    fn delta_m_zero_when_equal_and_term_signs_flip_on_swap() {
        let a = rows(&[("x", 10.0), ("y", 5.0)]);
        let d = dirs(&["x", "y"], &["y"]);
        assert_eq!(delta_m(&a, &a, &d).unwrap(), 0.0);

        let b = rows(&[("x", 12.0), ("y", 4.0)]);
        // per-term numerator signs flip when multi and single swap
        let fwd = delta_m(&b, &a, &d).unwrap();
        assert!(fwd > 0.0);
        let back = delta_m(&a, &b, &d).unwrap();
        assert!(back < 0.0);
    }

    #[test]
    fn delta_m_missing_task_is_error() {
        let a = rows(&[("x", 10.0)]);
        let b = rows(&[("x", 10.0)]);
        let d = dirs(&["x", "y"], &[]);
        assert!(delta_m(&a, &b, &d).is_err());
    }

    #[test]
    fn bias_report_cases() {
        let base = rows(&[("a", 100.0), ("b", 100.0)]);
        // equal -> all zero, sigma 0, ratio undefined
        let r = bias_report(&base, &base, &dirs(&["a", "b"], &[])).unwrap();
        assert_eq!(r.mu, 0.0);
        assert_eq!(r.sigma, 0.0);
        assert!(r.mu_over_sigma.is_none());

        // improvements +10 and -10 -> mu 0, sigma 10, ratio 0
        let model = rows(&[("a", 110.0), ("b", 90.0)]);
        let r = bias_report(&model, &base, &dirs(&["a", "b"], &[])).unwrap();
        assert!((r.mu - 0.0).abs() < 1e-12);
        assert!((r.sigma - 10.0).abs() < 1e-12);
        assert_eq!(r.mu_over_sigma.unwrap(), 0.0);

        // degenerate equal improvements
        let model = rows(&[("a", 105.0), ("b", 105.0)]);
        let r = bias_report(&model, &base, &dirs(&["a", "b"], &[])).unwrap();
        assert!((r.mu - 5.0).abs() < 1e-12);
        assert!(r.mu_over_sigma.is_none());
    }

    #[test]
    fn rep_similarity_analytic_values() {
        use crate::grid::Grid;
        use crate::model::TokenMap;
        let mk = |tokens: Array2<f64>| {
            let mut levels = BTreeMap::new();
            levels.insert(
                4usize,
                TokenMap::new(tokens, Grid::new(1, 2), 4).unwrap(),
            );
            MultiLevelFeatures::new(levels)
        };
        let t = mk(array![[1.0, 0.0], [0.0, 1.0]]);
        let same = rep_similarity(&[t.clone()], &[t.clone()]).unwrap();
        assert!((same.average - 1.0).abs() < 1e-12);

        let orth = mk(array![[0.0, 2.0], [3.0, 0.0]]);
        let r = rep_similarity(&[orth], &[t.clone()]).unwrap();
        assert!(r.average.abs() < 1e-12);

        // two teachers with similarities 1 and 0 average to 0.5
        let s2 = mk(array![[1.0, 0.0], [0.0, 1.0]]);
        let o2 = mk(array![[0.0, 1.0], [1.0, 0.0]]);
        let r = rep_similarity(&[s2, o2], &[t.clone(), t]).unwrap();
        assert!((r.per_teacher[0] - 1.0).abs() < 1e-12);
        assert!(r.per_teacher[1].abs() < 1e-12);
        assert!((r.average - 0.5).abs() < 1e-12);
    }
}
