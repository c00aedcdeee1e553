//! Patch-grid geometry and fixed sparse linear operators.
//!
//! Token maps are row-major flattenings of an `h x w` patch grid. Spatial
//! operations on them — bilinear resampling, shifts for convolution,
//! blurring — are constant linear maps over the row index, represented
//! sparsely so the tape can apply them and their transposes cheaply.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Spatial extent of a token map, in patches (or pixels for dense maps).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Self {
        Grid { h, w }
    }

    /// Number of cells.
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, y: usize, x: usize) -> usize {
        y * self.w + x
    }
}

/// Row-sparse linear operator acting on the rows of an `n x d` matrix.
///
/// `rows[i]` lists `(source_row, weight)` pairs; output row `i` is their
/// weighted sum. Cloning is cheap (shared storage).
#[derive(Debug, Clone)]
pub struct SparseLinear {
    rows: Arc<Vec<Vec<(u32, f64)>>>,
    in_rows: usize,
}

impl SparseLinear {
    pub fn from_rows(rows: Vec<Vec<(u32, f64)>>, in_rows: usize) -> Self {
        for row in &rows {
            for &(c, _) in row {
                assert!((c as usize) < in_rows, "source row out of range");
            }
        }
        SparseLinear {
            rows: Arc::new(rows),
            in_rows,
        }
    }

    pub fn out_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn apply(&self, a: &Array2<f64>) -> Array2<f64> {
        assert_eq!(a.nrows(), self.in_rows, "sparse apply: row count mismatch");
        let mut out = Array2::<f64>::zeros((self.rows.len(), a.ncols()));
        for (i, entries) in self.rows.iter().enumerate() {
            for &(c, wgt) in entries {
                let src = a.row(c as usize);
                let mut dst = out.row_mut(i);
                dst.zip_mut_with(&src, |d, s| *d += wgt * s);
            }
        }
        out
    }

    /// Apply the transpose: scatter `g`'s rows back to the input layout.
    pub fn apply_transpose(&self, g: &Array2<f64>, in_rows: usize) -> Array2<f64> {
        assert_eq!(g.nrows(), self.rows.len());
        assert_eq!(in_rows, self.in_rows);
        let mut out = Array2::<f64>::zeros((in_rows, g.ncols()));
        for (i, entries) in self.rows.iter().enumerate() {
            for &(c, wgt) in entries {
                let src = g.row(i);
                let mut dst = out.row_mut(c as usize);
                dst.zip_mut_with(&src, |d, s| *d += wgt * s);
            }
        }
        out
    }
}

/// Bilinear resampling from `src` to `dst`, half-pixel-center convention,
/// clamped at the borders. Identity when the grids are equal.
pub fn bilinear_resize(src: Grid, dst: Grid) -> SparseLinear {
    let mut rows = Vec::with_capacity(dst.len());
    for oy in 0..dst.h {
        for ox in 0..dst.w {
            if src == dst {
                rows.push(vec![(src.index(oy, ox) as u32, 1.0)]);
                continue;
            }
            let sy = ((oy as f64 + 0.5) * src.h as f64 / dst.h as f64 - 0.5)
                .clamp(0.0, (src.h - 1) as f64);
            let sx = ((ox as f64 + 0.5) * src.w as f64 / dst.w as f64 - 0.5)
                .clamp(0.0, (src.w - 1) as f64);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(src.h - 1);
            let x1 = (x0 + 1).min(src.w - 1);
            let fy = sy - y0 as f64;
            let fx = sx - x0 as f64;
            let mut entries: Vec<(u32, f64)> = Vec::with_capacity(4);
            let mut push = |idx: usize, wgt: f64| {
                if wgt == 0.0 {
                    return;
                }
                if let Some(e) = entries.iter_mut().find(|e| e.0 as usize == idx) {
                    e.1 += wgt;
                } else {
                    entries.push((idx as u32, wgt));
                }
            };
            push(src.index(y0, x0), (1.0 - fy) * (1.0 - fx));
            push(src.index(y0, x1), (1.0 - fy) * fx);
            push(src.index(y1, x0), fy * (1.0 - fx));
            push(src.index(y1, x1), fy * fx);
            rows.push(entries);
        }
    }
    SparseLinear::from_rows(rows, src.len())
}

/// Spatial shift by `(dy, dx)` with zero padding; building block for 3x3
/// convolution. Output row `(y, x)` reads input row `(y + dy, x + dx)`.
pub fn shift(grid: Grid, dy: isize, dx: isize) -> SparseLinear {
    let mut rows = Vec::with_capacity(grid.len());
    for y in 0..grid.h as isize {
        for x in 0..grid.w as isize {
            let sy = y + dy;
            let sx = x + dx;
            if sy >= 0 && sy < grid.h as isize && sx >= 0 && sx < grid.w as isize {
                rows.push(vec![(grid.index(sy as usize, sx as usize) as u32, 1.0)]);
            } else {
                rows.push(Vec::new());
            }
        }
    }
    SparseLinear::from_rows(rows, grid.len())
}

/// 3x3 box blur with edge clamping; each output cell averages its
/// (clamped) 3x3 neighborhood.
pub fn box_blur(grid: Grid) -> SparseLinear {
    let mut rows = Vec::with_capacity(grid.len());
    for y in 0..grid.h as isize {
        for x in 0..grid.w as isize {
            let mut entries: Vec<(u32, f64)> = Vec::with_capacity(9);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let sy = (y + dy).clamp(0, grid.h as isize - 1) as usize;
                    let sx = (x + dx).clamp(0, grid.w as isize - 1) as usize;
                    let idx = grid.index(sy, sx) as u32;
                    if let Some(e) = entries.iter_mut().find(|e| e.0 == idx) {
                        e.1 += 1.0 / 9.0;
                    } else {
                        entries.push((idx, 1.0 / 9.0));
                    }
                }
            }
            rows.push(entries);
        }
    }
    SparseLinear::from_rows(rows, grid.len())
}

/// Average over the whole grid, broadcast back to every cell.
pub fn grid_average(grid: Grid) -> SparseLinear {
    let n = grid.len();
    let row: Vec<(u32, f64)> = (0..n).map(|i| (i as u32, 1.0 / n as f64)).collect();
    SparseLinear::from_rows(vec![row; n], n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn resize_identity_when_grids_match() {
        let g = Grid::new(2, 2);
        let op = bilinear_resize(g, g);
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]];
        assert_eq!(op.apply(&x), x);
    }

    #[test]
    fn resize_preserves_constant_fields() {
        let op = bilinear_resize(Grid::new(3, 3), Grid::new(5, 7));
        let x = Array2::from_elem((9, 2), 4.2);
        let y = op.apply(&x);
        assert_eq!(y.nrows(), 35);
        for v in y.iter() {
            assert!((v - 4.2).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_upsamples_2x_midpoints() {
        // 1D-like case: 1x2 -> 1x4 with half-pixel centers.
        let op = bilinear_resize(Grid::new(1, 2), Grid::new(1, 4));
        let x = array![[0.0], [1.0]];
        let y = op.apply(&x);
        assert!((y[[0, 0]] - 0.0).abs() < 1e-12);
        assert!((y[[1, 0]] - 0.25).abs() < 1e-12);
        assert!((y[[2, 0]] - 0.75).abs() < 1e-12);
        assert!((y[[3, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transpose_is_adjoint() {
        // <Ax, y> == <x, A^T y> for random-ish data.
        let op = bilinear_resize(Grid::new(2, 3), Grid::new(3, 4));
        let x = Array2::from_shape_fn((6, 2), |(i, j)| (i * 2 + j) as f64 * 0.37 - 1.0);
        let y = Array2::from_shape_fn((12, 2), |(i, j)| (i + 3 * j) as f64 * 0.11 - 0.5);
        let ax = op.apply(&x);
        let aty = op.apply_transpose(&y, 6);
        let lhs: f64 = (&ax * &y).sum();
        let rhs: f64 = (&x * &aty).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn shift_moves_and_zero_pads() {
        let g = Grid::new(2, 2);
        let op = shift(g, 0, 1);
        let x = array![[1.0], [2.0], [3.0], [4.0]];
        let y = op.apply(&x);
        // row (0,0) reads (0,1); row (0,1) reads out of range -> 0
        assert_eq!(y, array![[2.0], [0.0], [4.0], [0.0]]);
    }

    #[test]
    fn grid_average_is_global_mean() {
        let g = Grid::new(2, 2);
        let op = grid_average(g);
        let x = array![[1.0], [2.0], [3.0], [6.0]];
        let y = op.apply(&x);
        for v in y.column(0) {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }
}
