//! Dense prediction heads.
//!
//! Each head projects the fused representation at every selected level,
//! resamples the projections to 1/4 of the label resolution, concatenates
//! them over levels, applies one 3x3 convolution with GELU and one 1x1
//! convolution to the task's output channels, and upsamples to the label
//! grid. Kept shallow on purpose; depth only slows the gradient checks.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{bilinear_resize, shift, Grid};
use crate::params::{randn2, zeros1, Bound, ParamSet};
use crate::tape::{Tape, Var};
use crate::tasks::TaskSpec;

/// Per-level projection width.
pub fn proj_channels(embed_dim: usize) -> usize {
    (embed_dim / 4).max(4)
}

/// Width after the 3x3 convolution.
pub fn mid_channels(embed_dim: usize) -> usize {
    (embed_dim / 2).max(8)
}

/// Register one head's parameters under `head.{task}.*`.
pub fn init_params(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    spec: &TaskSpec,
    embed_dim: usize,
    levels: &[usize],
) {
    let c_proj = proj_channels(embed_dim);
    let c_mid = mid_channels(embed_dim);
    let task = &spec.name;
    for level in levels {
        let p = format!("head.{task}.proj.l{level}");
        params.insert(format!("{p}.w"), randn2(rng, embed_dim, c_proj, 0.02).into_dyn());
        params.insert(format!("{p}.b"), zeros1(c_proj).into_dyn());
    }
    let cat = c_proj * levels.len();
    params.insert(
        format!("head.{task}.conv3.w"),
        randn2(rng, 9 * cat, c_mid, 0.02).into_dyn(),
    );
    params.insert(format!("head.{task}.conv3.b"), zeros1(c_mid).into_dyn());
    params.insert(
        format!("head.{task}.conv1.w"),
        randn2(rng, c_mid, spec.out_channels(), 0.02).into_dyn(),
    );
    params.insert(
        format!("head.{task}.conv1.b"),
        zeros1(spec.out_channels()).into_dyn(),
    );
}

/// 3x3 convolution over a flattened grid, composed from nine zero-padded
/// shifts and one matrix product.
fn conv3x3(tape: &Tape, x: Var, grid: Grid, w: Var, b: Var) -> Var {
    let mut shifted = Vec::with_capacity(9);
    for dy in -1..=1 {
        for dx in -1..=1 {
            shifted.push(tape.sparse_apply(x, &shift(grid, dy, dx)));
        }
    }
    let cat = tape.concat_cols(&shifted);
    let out = tape.matmul(cat, w);
    tape.add_row_broadcast(out, b)
}

/// Head forward from fused per-level token maps to a `(H*W) x C` logit
/// map at label resolution.
pub fn forward(
    tape: &Tape,
    bound: &Bound<'_>,
    spec: &TaskSpec,
    fused: &BTreeMap<usize, Var>,
    student_grid: Grid,
    label_grid: Grid,
) -> Result<Var> {
    if label_grid.h % 4 != 0 || label_grid.w % 4 != 0 {
        return Err(Error::config(format!(
            "label grid {}x{} must be divisible by 4",
            label_grid.h, label_grid.w
        )));
    }
    let quarter = Grid::new(label_grid.h / 4, label_grid.w / 4);
    let task = &spec.name;
    let mut per_level = Vec::with_capacity(fused.len());
    for (level, &tokens) in fused {
        let p = format!("head.{task}.proj.l{level}");
        let proj = tape.matmul(tokens, bound.try_var(&format!("{p}.w"))?);
        let proj = tape.add_row_broadcast(proj, bound.var(&format!("{p}.b")));
        per_level.push(tape.sparse_apply(proj, &bilinear_resize(student_grid, quarter)));
    }
    let cat = tape.concat_cols(&per_level);
    let mid = conv3x3(
        tape,
        cat,
        quarter,
        bound.var(&format!("head.{task}.conv3.w")),
        bound.var(&format!("head.{task}.conv3.b")),
    );
    let mid = tape.gelu(mid);
    let logits = tape.matmul(mid, bound.var(&format!("head.{task}.conv1.w")));
    let logits = tape.add_row_broadcast(logits, bound.var(&format!("head.{task}.conv1.b")));
    Ok(tape.sparse_apply(logits, &bilinear_resize(quarter, label_grid)))
}

/// Reshape a `(H*W) x C` prediction into `C x H x W`.
pub fn rows_to_chw(rows: &Array2<f64>, grid: Grid) -> ndarray::Array3<f64> {
    let c = rows.ncols();
    let mut out = ndarray::Array3::<f64>::zeros((c, grid.h, grid.w));
    for y in 0..grid.h {
        for x in 0..grid.w {
            for ch in 0..c {
                out[[ch, y, x]] = rows[[y * grid.w + x, ch]];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{stream_rng, Stream};
    use crate::tasks::TaskKind;

    fn build(spec: &TaskSpec, d: usize) -> ParamSet {
        let mut params = ParamSet::new();
        let mut rng = stream_rng(2, Stream::Init);
        init_params(&mut params, &mut rng, spec, d, &[1, 2, 3, 4]);
        params
    }

    #[test]
    fn semseg_head_output_shape() {
        let mut spec = TaskSpec::new("seg", TaskKind::Semseg);
        spec.num_classes = 5;
        let d = 16;
        let params = build(&spec, d);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let student_grid = Grid::new(4, 4);
        let label_grid = Grid::new(32, 32);
        let fused: BTreeMap<usize, Var> = (1..=4)
            .map(|l| {
                (
                    l,
                    tape.constant2(Array2::from_elem((16, d), 0.3 * l as f64)),
                )
            })
            .collect();
        let out = forward(&tape, &bound, &spec, &fused, student_grid, label_grid).unwrap();
        assert_eq!(tape.value(out).shape(), &[32 * 32, 5]);
    }

    #[test]
    fn normal_head_has_three_channels() {
        let spec = TaskSpec::new("norm", TaskKind::Normal);
        let d = 16;
        let params = build(&spec, d);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let fused: BTreeMap<usize, Var> = (1..=4)
            .map(|l| (l, tape.constant2(Array2::ones((16, d)))))
            .collect();
        let out = forward(
            &tape,
            &bound,
            &spec,
            &fused,
            Grid::new(4, 4),
            Grid::new(16, 16),
        )
        .unwrap();
        assert_eq!(tape.value(out).shape(), &[256, 3]);
    }

    #[test]
    fn label_grid_must_divide_by_four() {
        let spec = TaskSpec::new("seg", TaskKind::Semseg);
        let params = build(&spec, 16);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let fused: BTreeMap<usize, Var> = (1..=4)
            .map(|l| (l, tape.constant2(Array2::ones((16, 16)))))
            .collect();
        let err = forward(
            &tape,
            &bound,
            &spec,
            &fused,
            Grid::new(4, 4),
            Grid::new(30, 30),
        );
        assert!(err.is_err());
    }

    #[test]
    fn rows_chw_round_trip() {
        let rows = Array2::from_shape_fn((6, 2), |(i, j)| (i * 2 + j) as f64);
        let chw = rows_to_chw(&rows, Grid::new(2, 3));
        assert_eq!(chw[[0, 0, 0]], 0.0);
        assert_eq!(chw[[1, 0, 0]], 1.0);
        assert_eq!(chw[[0, 1, 2]], 10.0);
        let back = crate::tasks::loss::chw_to_rows(&chw);
        assert_eq!(back, rows);
    }
}
