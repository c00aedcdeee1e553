//! Task-specific losses over dense prediction maps.
//!
//! Predictions arrive as `(H*W) x C` nodes in probability space for the
//! classification-style tasks (softmax/sigmoid applied upstream) and raw
//! space for regression. Ground truths carry ignore conventions: label
//! 255 for categorical maps, zero-magnitude vectors for normals,
//! non-positive values for depth.

use ndarray::{Array2, Array3, ArrayD, Ix2};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tasks::{TaskKind, TaskSpec};

pub const IGNORE_LABEL: u16 = 255;

/// Ground truth for one task on one sample.
#[derive(Debug, Clone)]
pub enum Label {
    /// Categorical map (semseg / parsing), 255 = ignore.
    Classes(Array2<u16>),
    /// Binary map (saliency / boundary): 0, 1, or 255 = ignore.
    Binary(Array2<u16>),
    /// Per-pixel vectors (normals), zero magnitude = invalid.
    Vector(Array3<f64>),
    /// Scalar map (depth), non-positive = invalid.
    Scalar(Array2<f64>),
}

impl Label {
    pub fn pixels(&self) -> usize {
        match self {
            Label::Classes(m) | Label::Binary(m) => m.len(),
            Label::Vector(v) => v.dim().1 * v.dim().2,
            Label::Scalar(m) => m.len(),
        }
    }
}

/// Positive/negative counts of a binary map, ignoring 255s.
pub fn binary_counts(gt: &Array2<u16>) -> (usize, usize) {
    let mut pos = 0;
    let mut neg = 0;
    for &v in gt.iter() {
        match v {
            1 => pos += 1,
            0 => neg += 1,
            _ => {}
        }
    }
    (pos, neg)
}

/// Sum over valid pixels of `-ln p[i, y_i]`, plus the valid count.
/// `probs` is `(H*W) x K` in probability space (rows sum to 1).
pub fn cross_entropy_sum(tape: &Tape, probs: Var, gt: &Array2<u16>) -> Result<(Var, usize)> {
    let pv = tape.value2(probs);
    let (pixels, k) = pv.dim();
    if pixels != gt.len() {
        return Err(Error::config(format!(
            "cross entropy: {pixels} prediction rows vs {} gt pixels",
            gt.len()
        )));
    }
    let flat: Vec<u16> = gt.iter().copied().collect();
    let mut total = 0.0;
    let mut valid = 0usize;
    for (i, &y) in flat.iter().enumerate() {
        if y == IGNORE_LABEL {
            continue;
        }
        let y = y as usize;
        if y >= k {
            return Err(Error::config(format!(
                "class {y} out of range for {k} channels"
            )));
        }
        total -= pv[[i, y]].max(f64::MIN_POSITIVE).ln();
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::numeric("all pixels ignored".to_string()));
    }
    let value = ArrayD::from_elem(ndarray::IxDyn(&[]), total);
    let out = tape.custom_unary(probs, value, move |pval, g| {
        let gs = g.iter().next().copied().unwrap();
        let p = pval.clone().into_dimensionality::<Ix2>().unwrap();
        let mut dp = Array2::<f64>::zeros(p.raw_dim());
        for (i, &y) in flat.iter().enumerate() {
            if y == IGNORE_LABEL {
                continue;
            }
            let y = y as usize;
            dp[[i, y]] = -gs / p[[i, y]].max(f64::MIN_POSITIVE);
        }
        dp.into_dyn()
    });
    Ok((out, valid))
}

/// Sum over valid pixels of the weighted binary cross entropy
/// `-w(y) (y ln p + (1-y) ln(1-p))`, plus the valid count.
/// `probs` is `(H*W) x 1` in (0, 1).
pub fn weighted_bce_sum(
    tape: &Tape,
    probs: Var,
    gt: &Array2<u16>,
    w_pos: f64,
    w_neg: f64,
) -> Result<(Var, usize)> {
    let pv = tape.value2(probs);
    if pv.ncols() != 1 || pv.nrows() != gt.len() {
        return Err(Error::config(format!(
            "weighted bce: prediction {:?} vs {} gt pixels",
            pv.dim(),
            gt.len()
        )));
    }
    let flat: Vec<u16> = gt.iter().copied().collect();
    let mut total = 0.0;
    let mut valid = 0usize;
    for (i, &y) in flat.iter().enumerate() {
        let p = pv[[i, 0]].clamp(1e-12, 1.0 - 1e-12);
        match y {
            1 => {
                total -= w_pos * p.ln();
                valid += 1;
            }
            0 => {
                total -= w_neg * (1.0 - p).ln();
                valid += 1;
            }
            _ => {}
        }
    }
    if valid == 0 {
        return Err(Error::numeric("all pixels ignored".to_string()));
    }
    let value = ArrayD::from_elem(ndarray::IxDyn(&[]), total);
    let out = tape.custom_unary(probs, value, move |pval, g| {
        let gs = g.iter().next().copied().unwrap();
        let p = pval.clone().into_dimensionality::<Ix2>().unwrap();
        let mut dp = Array2::<f64>::zeros(p.raw_dim());
        for (i, &y) in flat.iter().enumerate() {
            let pc = p[[i, 0]].clamp(1e-12, 1.0 - 1e-12);
            match y {
                1 => dp[[i, 0]] = -gs * w_pos / pc,
                0 => dp[[i, 0]] = gs * w_neg / (1.0 - pc),
                _ => {}
            }
        }
        dp.into_dyn()
    });
    Ok((out, valid))
}

/// Sum over valid entries of `|pred - target|`, plus the count of valid
/// entries. `valid[i]` masks whole pixels (rows).
pub fn l1_sum(
    tape: &Tape,
    pred: Var,
    target: &Array2<f64>,
    valid: &[bool],
) -> Result<(Var, usize)> {
    let pv = tape.value2(pred);
    if pv.raw_dim() != target.raw_dim() || valid.len() != pv.nrows() {
        return Err(Error::config(format!(
            "l1: prediction {:?} vs target {:?} ({} mask entries)",
            pv.dim(),
            target.dim(),
            valid.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, row) in pv.rows().into_iter().enumerate() {
        if !valid[i] {
            continue;
        }
        for (a, b) in row.iter().zip(target.row(i).iter()) {
            total += (a - b).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::numeric("all pixels ignored".to_string()));
    }
    let target = target.clone();
    let mask: Vec<bool> = valid.to_vec();
    let value = ArrayD::from_elem(ndarray::IxDyn(&[]), total);
    let out = tape.custom_unary(pred, value, move |pval, g| {
        let gs = g.iter().next().copied().unwrap();
        let p = pval.clone().into_dimensionality::<Ix2>().unwrap();
        let mut dp = Array2::<f64>::zeros(p.raw_dim());
        for i in 0..p.nrows() {
            if !mask[i] {
                continue;
            }
            for j in 0..p.ncols() {
                let x = p[[i, j]] - target[[i, j]];
                dp[[i, j]] = gs * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
            }
        }
        dp.into_dyn()
    });
    Ok((out, count))
}

/// Valid-pixel mask for a vector label: nonzero magnitude.
pub fn vector_valid_mask(gt: &Array3<f64>) -> Vec<bool> {
    let (c, h, w) = gt.dim();
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mag: f64 = (0..c).map(|ch| gt[[ch, y, x]] * gt[[ch, y, x]]).sum();
            mask[y * w + x] = mag > 0.0;
        }
    }
    mask
}

/// Flatten a `C x H x W` map into `(H*W) x C`, matching prediction layout.
pub fn chw_to_rows(map: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = map.dim();
    let mut out = Array2::<f64>::zeros((h * w, c));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[y * w + x, ch]] = map[[ch, y, x]];
            }
        }
    }
    out
}

/// Batch-level loss for one task from per-sample probability/regression
/// nodes. Applies the task's reduction conventions:
/// cross-entropy over valid pixels (semseg/parsing), balanced BCE with
/// per-batch class frequencies (saliency), fixed 0.95/0.05 BCE
/// (boundary), L1 over valid pixels (normal/depth).
pub fn task_loss_batch(
    tape: &Tape,
    spec: &TaskSpec,
    preds: &[Var],
    labels: &[&Label],
) -> Result<Var> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::config("task loss: batch size mismatch"));
    }
    match spec.kind {
        TaskKind::Semseg | TaskKind::Parsing => {
            let mut parts = Vec::new();
            let mut total_valid = 0usize;
            for (pred, label) in preds.iter().zip(labels) {
                let Label::Classes(gt) = label else {
                    return Err(Error::config(format!(
                        "task {} expects categorical labels",
                        spec.name
                    )));
                };
                let (sum, valid) = cross_entropy_sum(tape, *pred, gt)?;
                parts.push(sum);
                total_valid += valid;
            }
            Ok(scale_sum(tape, &parts, total_valid))
        }
        TaskKind::Saliency | TaskKind::Boundary => {
            let (mut pos, mut neg) = (0usize, 0usize);
            for label in labels {
                let Label::Binary(gt) = label else {
                    return Err(Error::config(format!(
                        "task {} expects binary labels",
                        spec.name
                    )));
                };
                let (p, n) = binary_counts(gt);
                pos += p;
                neg += n;
            }
            if pos + neg == 0 {
                return Err(Error::numeric("all pixels ignored".to_string()));
            }
            let (w_pos, w_neg) = match spec.kind {
                // boundary uses the fixed convention; saliency balances by
                // batch class frequency
                TaskKind::Boundary => (0.95, 0.05),
                _ => {
                    let total = (pos + neg) as f64;
                    (neg as f64 / total, pos as f64 / total)
                }
            };
            let mut parts = Vec::new();
            let mut total_valid = 0usize;
            for (pred, label) in preds.iter().zip(labels) {
                let Label::Binary(gt) = label else { unreachable!() };
                let (sum, valid) = weighted_bce_sum(tape, *pred, gt, w_pos, w_neg)?;
                parts.push(sum);
                total_valid += valid;
            }
            Ok(scale_sum(tape, &parts, total_valid))
        }
        TaskKind::Normal => {
            let mut parts = Vec::new();
            let mut total_valid = 0usize;
            for (pred, label) in preds.iter().zip(labels) {
                let Label::Vector(gt) = label else {
                    return Err(Error::config(format!(
                        "task {} expects vector labels",
                        spec.name
                    )));
                };
                let mask = vector_valid_mask(gt);
                let target = chw_to_rows(gt);
                let (sum, count) = l1_sum(tape, *pred, &target, &mask)?;
                parts.push(sum);
                total_valid += count;
            }
            Ok(scale_sum(tape, &parts, total_valid))
        }
        TaskKind::Depth => {
            let mut parts = Vec::new();
            let mut total_valid = 0usize;
            for (pred, label) in preds.iter().zip(labels) {
                let Label::Scalar(gt) = label else {
                    return Err(Error::config(format!(
                        "task {} expects scalar labels",
                        spec.name
                    )));
                };
                let mask: Vec<bool> = gt.iter().map(|&v| v > 0.0).collect();
                let target =
                    Array2::from_shape_vec((gt.len(), 1), gt.iter().copied().collect()).unwrap();
                let (sum, count) = l1_sum(tape, *pred, &target, &mask)?;
                parts.push(sum);
                total_valid += count;
            }
            Ok(scale_sum(tape, &parts, total_valid))
        }
    }
}

fn scale_sum(tape: &Tape, parts: &[Var], count: usize) -> Var {
    let mut acc = parts[0];
    for p in &parts[1..] {
        acc = tape.add(acc, *p);
    }
    tape.scale(acc, 1.0 / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn one_hot_probabilities_give_zero_cross_entropy() {
        let tape = Tape::new();
        let probs = tape.constant2(array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]);
        let gt = array![[0u16, 1], [0, 1]];
        let (sum, valid) = cross_entropy_sum(&tape, probs, &gt).unwrap();
        assert_eq!(valid, 4);
        assert_eq!(tape.scalar(sum), 0.0);
    }

    #[test]
    fn uniform_probabilities_give_ln_k() {
        let k = 5usize;
        let tape = Tape::new();
        let probs = tape.constant2(Array2::from_elem((6, k), 1.0 / k as f64));
        let gt = Array2::from_elem((2, 3), 2u16);
        let (sum, valid) = cross_entropy_sum(&tape, probs, &gt).unwrap();
        let mean = tape.scalar(sum) / valid as f64;
        assert!((mean - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ignored_pixels_are_excluded_and_all_ignored_errors() {
        let tape = Tape::new();
        let probs = tape.constant2(array![[0.5, 0.5], [1.0, 0.0]]);
        let gt = array![[255u16, 0]];
        let (sum, valid) = cross_entropy_sum(&tape, probs, &gt).unwrap();
        assert_eq!(valid, 1);
        assert_eq!(tape.scalar(sum), 0.0);

        let gt = array![[255u16, 255]];
        assert!(cross_entropy_sum(&tape, probs, &gt).is_err());
    }

    #[test]
    fn boundary_closed_form_at_half() {
        // uniform p = 0.5 on P positives, Q negatives:
        // mean loss = -(0.95 P + 0.05 Q) ln 0.5 / (P + Q)
        let tape = Tape::new();
        let probs = tape.constant2(Array2::from_elem((6, 1), 0.5));
        let gt = array![[1u16, 1, 1], [0, 0, 255]];
        let (sum, valid) = weighted_bce_sum(&tape, probs, &gt, 0.95, 0.05).unwrap();
        assert_eq!(valid, 5);
        let expected = -(0.95 * 3.0 + 0.05 * 2.0) * 0.5_f64.ln() / 5.0;
        assert!((tape.scalar(sum) / 5.0 - expected).abs() < 1e-12);
    }

    #[test]
    fn depth_l1_uniform_offset() {
        let tape = Tape::new();
        let gt = Array2::from_elem((2, 3), 2.0);
        let pred =
            tape.constant2(Array2::from_elem((6, 1), 2.1));
        let spec = {
            let mut s = TaskSpec::new("depth", TaskKind::Depth);
            s.loss_weight = Some(1.0);
            s
        };
        let label = Label::Scalar(gt);
        let loss = task_loss_batch(&tape, &spec, &[pred], &[&label]).unwrap();
        assert!((tape.scalar(loss) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_checks() {
        let logits0 = array![[0.2, -0.4, 0.9], [1.2, 0.0, -0.3]];
        let gt = array![[2u16, 0]];
        let forward = |l: &Array2<f64>| {
            let tape = Tape::new();
            let lv = tape.leaf2(l.clone());
            let probs = tape.softmax_rows(lv);
            let (sum, valid) = cross_entropy_sum(&tape, probs, &gt).unwrap();
            let loss = tape.scale(sum, 1.0 / valid as f64);
            (tape, lv, loss)
        };
        let (tape, lv, loss) = forward(&logits0);
        let grads = tape.backward(loss);
        let gl = grads.get(lv).unwrap().clone();
        let eps = 1e-5;
        for i in 0..2 {
            for j in 0..3 {
                let mut plus = logits0.clone();
                plus[[i, j]] += eps;
                let mut minus = logits0.clone();
                minus[[i, j]] -= eps;
                let (tp, _, lp) = forward(&plus);
                let (tm, _, lm) = forward(&minus);
                let fd = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * eps);
                let ad = gl[[i, j]];
                let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
                assert!(rel < 1e-6, "({i},{j}): fd {fd} vs ad {ad}");
            }
        }
    }
}
