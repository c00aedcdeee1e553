//! Student-to-teacher alignment: bilinear resampling onto the teacher's
//! patch grid, plus a linear channel map when the widths differ. Used
//! only on the distillation path.

use crate::error::Result;
use crate::grid::{bilinear_resize, Grid};
use crate::model::{TeacherSpec, TokenMap};
use crate::params::Bound;
use crate::tape::{Tape, Var};

/// Align a student token map (on `student_grid`, width d) to `spec`'s
/// grid and channel width. The channel map parameters are looked up as
/// `align.t{teacher}.l{level}.{w,b}` and must exist iff the widths differ.
pub fn to_teacher(
    tape: &Tape,
    bound: &Bound<'_>,
    teacher: usize,
    level: usize,
    student_grid: Grid,
    embed_dim: usize,
    r: Var,
    spec: &TeacherSpec,
) -> Result<Var> {
    let resized = if spec.grid == student_grid {
        r
    } else {
        tape.sparse_apply(r, &bilinear_resize(student_grid, spec.grid))
    };
    if spec.channel_dim == embed_dim {
        return Ok(resized);
    }
    let p = format!("align.t{teacher}.l{level}");
    let w = bound.try_var(&format!("{p}.w"))?;
    let b = bound.try_var(&format!("{p}.b"))?;
    let mapped = tape.matmul(resized, w);
    Ok(tape.add_row_broadcast(mapped, b))
}

/// Non-tape convenience for evaluation paths: align a concrete token map.
pub fn align_token_map(
    map: &TokenMap,
    spec: &TeacherSpec,
    channel_map: Option<(&ndarray::Array2<f64>, &ndarray::Array1<f64>)>,
) -> Result<TokenMap> {
    let resized = if spec.grid == map.grid {
        map.tokens.clone()
    } else {
        bilinear_resize(map.grid, spec.grid).apply(&map.tokens)
    };
    let out = match channel_map {
        Some((w, b)) => resized.dot(w) + b,
        None => resized,
    };
    TokenMap::new(out, spec.grid, map.level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TeacherKind;
    use ndarray::{Array1, Array2};

    #[test]
    fn identity_when_grid_and_channels_match() {
        let tokens = Array2::from_shape_fn((16, 8), |(i, j)| (i * 8 + j) as f64 * 0.1);
        let map = TokenMap::new(tokens.clone(), Grid::new(4, 4), 2).unwrap();
        let spec = TeacherSpec {
            teacher_id: "t".into(),
            channel_dim: 8,
            grid: Grid::new(4, 4),
            kind: TeacherKind::Synthetic,
        };
        let out = align_token_map(&map, &spec, None).unwrap();
        assert_eq!(out.tokens, tokens);
    }

    #[test]
    fn upsamples_to_teacher_grid() {
        // student 32x32 -> teacher 36x36 as in the ViT-B/16 vs /14 case
        let map = TokenMap::new(Array2::ones((32 * 32, 4)), Grid::new(32, 32), 1).unwrap();
        let spec = TeacherSpec {
            teacher_id: "t".into(),
            channel_dim: 4,
            grid: Grid::new(36, 36),
            kind: TeacherKind::File,
        };
        let out = align_token_map(&map, &spec, None).unwrap();
        assert_eq!(out.grid, Grid::new(36, 36));
        assert_eq!(out.tokens.nrows(), 36 * 36);
        assert_eq!(out.dim(), 4);
        for v in out.tokens.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_map_changes_width() {
        // 768-dim student to a 1024-channel teacher
        let map = TokenMap::new(Array2::ones((4, 768)), Grid::new(2, 2), 1).unwrap();
        let spec = TeacherSpec {
            teacher_id: "t".into(),
            channel_dim: 1024,
            grid: Grid::new(2, 2),
            kind: TeacherKind::File,
        };
        let w = Array2::from_elem((768, 1024), 1.0 / 768.0);
        let b = Array1::zeros(1024);
        let out = align_token_map(&map, &spec, Some((&w, &b))).unwrap();
        assert_eq!(out.dim(), 1024);
        for v in out.tokens.iter() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }
}
