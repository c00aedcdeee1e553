//! The distillation objective and the joint multi-task objective.
//!
//! Per teacher and level, the representation match is
//! `alpha * L_cos + beta * L_smooth-L1` with alpha = 0.9, beta = 0.1;
//! the distillation total is the literal double sum over the four
//! selected levels and all teachers. The joint objective adds the
//! weighted task losses: `gamma * L_distill + sum_t w_t L_t`.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenMap;
use crate::tape::{Tape, Var};
use crate::tasks::TaskSpec;

/// Loss weighting. Defaults: alpha 0.9, beta 0.1, gamma 1.0, delta 1.0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_delta")]
    pub smooth_l1_delta: f64,
}

fn default_alpha() -> f64 {
    0.9
}
fn default_beta() -> f64 {
    0.1
}
fn default_gamma() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    1.0
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 0.9,
            beta: 0.1,
            gamma: 1.0,
            smooth_l1_delta: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::config(
                "distill weights alpha/beta/gamma must be nonnegative".to_string(),
            ));
        }
        if self.smooth_l1_delta <= 0.0 {
            return Err(Error::config("smooth_l1_delta must be positive"));
        }
        Ok(())
    }
}

/// Itemized losses for one training step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub distill_total: f64,
    /// `per_teacher_per_level[i]` maps level -> weighted pair loss.
    pub per_teacher_per_level: Vec<BTreeMap<usize, f64>>,
    pub task_losses: BTreeMap<String, f64>,
    pub grand_total: f64,
}

impl LossBreakdown {
    /// Check the accounting identity
    /// `grand = gamma * distill + sum_t w_t * task_t` to 1e-9 relative.
    pub fn check_identity(&self, gamma: f64, specs: &[TaskSpec]) -> Result<()> {
        let mut expected = gamma * self.distill_total;
        for (name, loss) in &self.task_losses {
            let spec = specs
                .iter()
                .find(|s| &s.name == name)
                .ok_or_else(|| Error::config(format!("no task spec for {name}")))?;
            expected += spec.weight() * loss;
        }
        let scale = expected.abs().max(self.grand_total.abs()).max(1e-12);
        if (expected - self.grand_total).abs() / scale > 1e-9 {
            return Err(Error::numeric(format!(
                "loss accounting mismatch: grand {} vs recomputed {}",
                self.grand_total, expected
            )));
        }
        Ok(())
    }
}

/// Tape node for `alpha * cos + beta * smooth-L1` of one (student,
/// teacher) pair.
pub fn pair_loss(
    tape: &Tape,
    student: Var,
    teacher: &Array2<f64>,
    cfg: &DistillConfig,
) -> Result<Var> {
    let cos = tape.cosine_mean(student, teacher)?;
    let sl1 = tape.smooth_l1_mean(student, teacher, cfg.smooth_l1_delta)?;
    let a = tape.scale(cos, cfg.alpha);
    let b = tape.scale(sl1, cfg.beta);
    Ok(tape.add(a, b))
}

/// Distillation total on a tape: sum over teachers and levels of the
/// weighted pair loss. `students[i]` holds the aligned student node per
/// level for teacher `i`; `teachers[i]` the matching constants.
pub struct DistillTerms {
    pub total: Var,
    pub per_teacher_per_level: Vec<BTreeMap<usize, f64>>,
}

pub fn distill_loss(
    tape: &Tape,
    students: &[BTreeMap<usize, Var>],
    teachers: &[BTreeMap<usize, Array2<f64>>],
    cfg: &DistillConfig,
) -> Result<DistillTerms> {
    if students.len() != teachers.len() {
        return Err(Error::config(format!(
            "{} student feature sets vs {} teacher sets",
            students.len(),
            teachers.len()
        )));
    }
    let mut total: Option<Var> = None;
    let mut table = Vec::with_capacity(students.len());
    for (i, (s_levels, t_levels)) in students.iter().zip(teachers.iter()).enumerate() {
        let s_keys: Vec<usize> = s_levels.keys().copied().collect();
        let t_keys: Vec<usize> = t_levels.keys().copied().collect();
        if s_keys != t_keys {
            return Err(Error::LevelMismatch(format!(
                "teacher {i}: student levels {s_keys:?} vs teacher levels {t_keys:?}"
            )));
        }
        let mut row = BTreeMap::new();
        for (level, s) in s_levels {
            let t = &t_levels[level];
            let pair = pair_loss(tape, *s, t, cfg)?;
            row.insert(*level, tape.scalar(pair));
            total = Some(match total {
                Some(acc) => tape.add(acc, pair),
                None => pair,
            });
        }
        table.push(row);
    }
    let total = total.ok_or_else(|| Error::config("empty teacher set"))?;
    Ok(DistillTerms {
        total,
        per_teacher_per_level: table,
    })
}

/// `gamma * distill + sum_t w_t * L_t` from already-reduced scalars.
pub fn joint_loss(
    distill: f64,
    task_losses: &BTreeMap<String, f64>,
    specs: &[TaskSpec],
    gamma: f64,
) -> Result<f64> {
    let mut total = gamma * distill;
    for (name, loss) in task_losses {
        let spec = specs
            .iter()
            .find(|s| &s.name == name)
            .ok_or_else(|| Error::config(format!("missing loss weight for task {name}")))?;
        total += spec.weight() * loss;
    }
    Ok(total)
}

// ---- plain (non-tape) entry points for evaluation and tests ----------------

/// Mean over tokens of `1 - cos(r_i, t_i)`.
pub fn cosine_loss(r: &TokenMap, t: &TokenMap) -> Result<f64> {
    let tape = Tape::new();
    let rv = tape.constant2(r.tokens.clone());
    let loss = tape.cosine_mean(rv, &t.tokens)?;
    Ok(tape.scalar(loss))
}

/// Mean over entries of the Huber penalty with threshold `delta`.
pub fn smooth_l1_loss(r: &TokenMap, t: &TokenMap, delta: f64) -> Result<f64> {
    let tape = Tape::new();
    let rv = tape.constant2(r.tokens.clone());
    let loss = tape.smooth_l1_mean(rv, &t.tokens, delta)?;
    Ok(tape.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use ndarray::array;

    fn map_of(tokens: Array2<f64>) -> TokenMap {
        let n = tokens.nrows();
        TokenMap::new(tokens, Grid::new(1, n), 0).unwrap()
    }

    #[test]
    fn eq5_arithmetic_single_pair() {
        // cosine term 1 (orthogonal) and smooth-L1 term 0.125 gives
        // 0.9 * 1 + 0.1 * 0.125 = 0.9125 exactly.
        let tape = Tape::new();
        let student = tape.constant2(array![[0.5, 0.0]]);
        let teacher = array![[0.0, 0.5]];
        let cfg = DistillConfig::default();
        let pair = pair_loss(&tape, student, &teacher, &cfg).unwrap();
        // cos = 1; smooth-l1: entries (0.5, -0.5) -> 0.5*0.25 each, mean 0.125
        assert!((tape.scalar(pair) - 0.9125).abs() < 1e-12);
    }

    #[test]
    fn distill_zero_when_student_matches() {
        let tape = Tape::new();
        let t = array![[1.0, 2.0], [3.0, 4.0]];
        let s = tape.constant2(t.clone());
        let students = vec![BTreeMap::from([(4usize, s)])];
        let teachers = vec![BTreeMap::from([(4usize, t)])];
        let cfg = DistillConfig::default();
        let out = distill_loss(&tape, &students, &teachers, &cfg).unwrap();
        // the norm product in the cosine may carry a ulp of sqrt rounding
        assert!(tape.scalar(out.total).abs() < 1e-12);
    }

    #[test]
    fn distill_additive_over_teachers() {
        let cfg = DistillConfig::default();
        let t1 = array![[1.0, 0.2], [0.1, -2.0]];
        let t2 = array![[0.5, 0.5], [1.5, 0.3]];
        let s1m = array![[0.9, 0.4], [0.2, -1.0]];
        let s2m = array![[0.1, 0.6], [1.0, 0.8]];

        let single = |s: &Array2<f64>, t: &Array2<f64>| {
            let tape = Tape::new();
            let sv = tape.constant2(s.clone());
            let students = vec![BTreeMap::from([(4usize, sv)])];
            let teachers = vec![BTreeMap::from([(4usize, t.clone())])];
            tape.scalar(distill_loss(&tape, &students, &teachers, &cfg).unwrap().total)
        };
        let tape = Tape::new();
        let s1 = tape.constant2(s1m.clone());
        let s2 = tape.constant2(s2m.clone());
        let students = vec![
            BTreeMap::from([(4usize, s1)]),
            BTreeMap::from([(4usize, s2)]),
        ];
        let teachers = vec![
            BTreeMap::from([(4usize, t1.clone())]),
            BTreeMap::from([(4usize, t2.clone())]),
        ];
        let both = tape.scalar(distill_loss(&tape, &students, &teachers, &cfg).unwrap().total);
        let sum = single(&s1m, &t1) + single(&s2m, &t2);
        assert!((both - sum).abs() < 1e-12);
    }

    #[test]
    fn level_mismatch_is_config_error() {
        let tape = Tape::new();
        let s = tape.constant2(array![[1.0, 0.0]]);
        let students = vec![BTreeMap::from([(2usize, s)])];
        let teachers = vec![BTreeMap::from([(4usize, array![[1.0, 0.0]])])];
        let cfg = DistillConfig::default();
        assert!(matches!(
            distill_loss(&tape, &students, &teachers, &cfg),
            Err(Error::LevelMismatch(_))
        ));
    }

    #[test]
    fn joint_loss_arithmetic() {
        let specs = vec![
            {
                let mut s = TaskSpec::new("a", crate::tasks::TaskKind::Semseg);
                s.loss_weight = Some(1.0);
                s
            },
            {
                let mut s = TaskSpec::new("b", crate::tasks::TaskKind::Boundary);
                s.loss_weight = Some(50.0);
                s
            },
        ];
        let tasks = BTreeMap::from([("a".to_string(), 2.0), ("b".to_string(), 0.1)]);
        let total = joint_loss(0.5, &tasks, &specs, 1.0).unwrap();
        assert!((total - 7.5).abs() < 1e-12);
        // gamma = 0 leaves the pure multi-task loss
        let total = joint_loss(0.5, &tasks, &specs, 0.0).unwrap();
        assert!((total - 7.0).abs() < 1e-12);
        // all zero
        let zero = BTreeMap::from([("a".to_string(), 0.0), ("b".to_string(), 0.0)]);
        assert_eq!(joint_loss(0.0, &zero, &specs, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn joint_loss_missing_weight_rejected() {
        let specs = vec![TaskSpec::new("a", crate::tasks::TaskKind::Semseg)];
        let tasks = BTreeMap::from([("zzz".to_string(), 1.0)]);
        assert!(joint_loss(0.0, &tasks, &specs, 1.0).is_err());
    }

    #[test]
    fn cosine_scale_invariance_and_smooth_l1_sensitivity() {
        let r = map_of(array![[0.3, 0.4], [1.0, -1.0]]);
        let mut scaled = r.clone();
        scaled.tokens.row_mut(0).mapv_inplace(|v| v * 7.0);
        scaled.tokens.row_mut(1).mapv_inplace(|v| v * 0.2);
        let t = map_of(array![[1.0, 0.7], [0.2, 0.5]]);
        let a = cosine_loss(&r, &t).unwrap();
        let b = cosine_loss(&scaled, &t).unwrap();
        assert!((a - b).abs() < 1e-12);
        let sa = smooth_l1_loss(&r, &t, 1.0).unwrap();
        let sb = smooth_l1_loss(&scaled, &t, 1.0).unwrap();
        assert!((sa - sb).abs() > 1e-6);
    }

    #[test]
    fn symmetry_of_both_elementary_losses() {
        let r = map_of(array![[0.3, 0.4], [1.0, -1.0]]);
        let t = map_of(array![[1.0, 0.7], [0.2, 0.5]]);
        assert!((cosine_loss(&r, &t).unwrap() - cosine_loss(&t, &r).unwrap()).abs() < 1e-12);
        assert!(
            (smooth_l1_loss(&r, &t, 1.0).unwrap() - smooth_l1_loss(&t, &r, 1.0).unwrap()).abs()
                < 1e-12
        );
    }

    #[test]
    fn breakdown_identity_checks() {
        let specs = vec![{
            let mut s = TaskSpec::new("a", crate::tasks::TaskKind::Semseg);
            s.loss_weight = Some(2.0);
            s
        }];
        let mut b = LossBreakdown {
            step: 0,
            distill_total: 1.0,
            per_teacher_per_level: Vec::new(),
            task_losses: BTreeMap::from([("a".to_string(), 3.0)]),
            grand_total: 7.0,
        };
        b.check_identity(1.0, &specs).unwrap();
        b.grand_total = 7.1;
        assert!(b.check_identity(1.0, &specs).is_err());
    }
}
