//! Reverse-mode automatic differentiation over `f64` arrays.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its value and a backward closure. [`Tape::backward`] replays the nodes
//! in reverse, accumulating gradients for every recorded variable. One tape
//! lives for exactly one forward/backward pass; parameters are re-bound as
//! leaves on a fresh tape each training step.
//!
//! All arithmetic is 64-bit and single-threaded, so repeated runs with the
//! same inputs are bit-identical.

use std::cell::RefCell;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2};

use crate::error::{Error, Result};
use crate::grid::SparseLinear;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

type BackFn = Box<dyn Fn(&[ArrayD<f64>], &ArrayD<f64>, &mut GradSink)>;

struct Inner {
    values: Vec<ArrayD<f64>>,
    backs: Vec<Option<BackFn>>,
}

/// Gradient accumulator indexed by node id.
pub struct GradSink {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradSink {
    fn add(&mut self, id: usize, g: ArrayD<f64>) {
        match &mut self.grads[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients of one scalar root with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

/// Recording tape for one forward/backward pass.
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                values: Vec::new(),
                backs: Vec::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, back: Option<BackFn>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.backs.push(back);
        Var {
            id: inner.values.len() - 1,
        }
    }

    /// Record a leaf (parameter or input). Its gradient is retrievable
    /// after `backward`.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    /// Record a constant. Identical to a leaf; the name documents intent.
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    pub fn leaf2(&self, value: Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn constant2(&self, value: Array2<f64>) -> Var {
        self.constant(value.into_dyn())
    }

    /// Clone of the value at `v`.
    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.inner.borrow().values[v.id].clone()
    }

    /// Value at `v` as a matrix.
    pub fn value2(&self, v: Var) -> Array2<f64> {
        self.value(v).into_dimensionality::<Ix2>().unwrap()
    }

    /// Value of a zero-dimensional (scalar) node.
    pub fn scalar(&self, v: Var) -> f64 {
        let inner = self.inner.borrow();
        let val = &inner.values[v.id];
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val.iter().next().copied().unwrap()
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().values[v.id].shape().to_vec()
    }

    fn as2(value: &ArrayD<f64>) -> Array2<f64> {
        value.clone().into_dimensionality::<Ix2>().unwrap()
    }

    /// Run reverse-mode accumulation from scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let inner = self.inner.borrow();
        let mut sink = GradSink {
            grads: vec![None; inner.values.len()],
        };
        let seed = ArrayD::from_elem(inner.values[root.id].raw_dim(), 1.0);
        sink.grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let Some(g) = sink.grads[id].take() else {
                continue;
            };
            if let Some(back) = &inner.backs[id] {
                back(&inner.values, &g, &mut sink);
            }
            sink.grads[id] = Some(g);
        }
        Gradients { grads: sink.grads }
    }

    // ---- elementwise and linear ops -------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = {
            let inner = self.inner.borrow();
            &inner.values[a.id] + &inner.values[b.id]
        };
        self.push(
            value,
            Some(Box::new(move |_vals, g, sink| {
                sink.add(a.id, g.clone());
                sink.add(b.id, g.clone());
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = {
            let inner = self.inner.borrow();
            &inner.values[a.id] - &inner.values[b.id]
        };
        self.push(
            value,
            Some(Box::new(move |_vals, g, sink| {
                sink.add(a.id, g.clone());
                sink.add(b.id, -g);
            })),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = {
            let inner = self.inner.borrow();
            &inner.values[a.id] * &inner.values[b.id]
        };
        self.push(
            value,
            Some(Box::new(move |vals, g, sink| {
                sink.add(a.id, g * &vals[b.id]);
                sink.add(b.id, g * &vals[a.id]);
            })),
        )
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = {
            let inner = self.inner.borrow();
            &inner.values[a.id] * c
        };
        self.push(
            value,
            Some(Box::new(move |_vals, g, sink| {
                sink.add(a.id, g * c);
            })),
        )
    }

    /// Elementwise product with a constant array of the same shape.
    pub fn mul_const(&self, a: Var, c: ArrayD<f64>) -> Var {
        assert_eq!(self.shape(a), c.shape(), "mul_const: shape mismatch");
        let value = {
            let inner = self.inner.borrow();
            &inner.values[a.id] * &c
        };
        self.push(
            value,
            Some(Box::new(move |_vals, g, sink| {
                sink.add(a.id, g * &c);
            })),
        )
    }

    /// Multiply every entry of `a` by the scalar node `s`.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Var {
        let (value, _sv) = {
            let inner = self.inner.borrow();
            let sv = inner.values[s.id].iter().next().copied().unwrap();
            (&inner.values[a.id] * sv, sv)
        };
        self.push(
            value,
            Some(Box::new(move |vals, g, sink| {
                let sv = vals[s.id].iter().next().copied().unwrap();
                sink.add(a.id, g * sv);
                let ds = (g * &vals[a.id]).sum();
                sink.add(s.id, ArrayD::from_elem(vals[s.id].raw_dim(), ds));
            })),
        )
    }

    /// Matrix product of two rank-2 nodes.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let inner = self.inner.borrow();
            let av = Self::as2(&inner.values[a.id]);
            let bv = Self::as2(&inner.values[b.id]);
            assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dim mismatch");
            av.dot(&bv).into_dyn()
        };
        self.push(
            value,
            Some(Box::new(move |vals, g, sink| {
                let av = Self::as2(&vals[a.id]);
                let bv = Self::as2(&vals[b.id]);
                let gm = Self::as2(g);
                sink.add(a.id, gm.dot(&bv.t()).into_dyn());
                sink.add(b.id, av.t().dot(&gm).into_dyn());
            })),
        )
    }

    /// Transpose of a rank-2 node.
    pub fn transpose(&self, a: Var) -> Var {
        let value = {
            let inner = self.inner.borrow();
            Self::as2(&inner.values[a.id]).t().to_owned().into_dyn()
        };
        self.push(
            value,
            Some(Box::new(move |_vals, g, sink| {
                sink.add(a.id, Self::as2(g).t().to_owned().into_dyn());
            })),
        )
    }

    /// Add a rank-1 bias to every row of a rank-2 node.
    pub fn add_row_broadcast(&self, a: Var, bias: Var) -> Var {
        let value = {
            let inner = self.inner.borrow();
            let av = Self::as2(&inner.values[a.id]);
            let bv = inner.values[bias.id]
                .clone()
                .into_dimensionality::<Ix1>()
                .unwrap();
            assert_eq!(av.ncols(), bv.len(), "add_row_broadcast: width mismatch");
            (&av + &bv).into_dyn()
        };
        self.push(
            value,
            Some(Box::new(move |_vals, g, sink| {
                let gm = Self::as2(g);
                sink.add(a.id, g.clone());
                sink.add(bias.id, gm.sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    // ---- nonlinearities ---------------------------------------------------

    /// GELU with the exact error-function form: `x * Phi(x)`.
    pub fn gelu(&self, a: Var) -> Var {
        let value = {
            let inner = self.inner.borrow();
            inner.values[a.id].mapv(gelu_exact)
        };
        self.push(
            value,
            Some(Box::new(move |vals, g, sink| {
                sink.add(a.id, g * &vals[a.id].mapv(gelu_exact_grad));
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = {
            let inner = self.inner.borrow();
            inner.values[a.id].mapv(sigmoid)
        };
        let out = value.clone();
        self.push(
            value,
            Some(Box::new(move |_vals, g, sink| {
                sink.add(a.id, g * &out.mapv(|s| s * (1.0 - s)));
            })),
        )
    }

    pub fn softplus(&self, a: Var) -> Var {
        let value = {
            let inner = self.inner.borrow();
            inner.values[a.id].mapv(softplus)
        };
        self.push(
            value,
            Some(Box::new(move |vals, g, sink| {
                sink.add(a.id, g * &vals[a.id].mapv(sigmoid));
            })),
        )
    }

    /// Row-wise softmax of a rank-2 node.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let value = {
            let inner = self.inner.borrow();
            let mut m = Self::as2(&inner.values[a.id]);
            for mut row in m.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|x| (x - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|x| x / sum);
            }
            m.into_dyn()
        };
        let y = Self::as2(&value);
        self.push(
            value,
            Some(Box::new(move |_vals, g, sink| {
                let gm = Self::as2(g);
                let mut dx = Array2::<f64>::zeros(gm.raw_dim());
                for (i, (grow, yrow)) in gm.rows().into_iter().zip(y.rows()).enumerate() {
                    let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = yrow[j] * (grow[j] - dot);
                    }
                }
                sink.add(a.id, dx.into_dyn());
            })),
        )
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (value, xhat, inv_sigma) = {
            let inner = self.inner.borrow();
            let xv = Self::as2(&inner.values[x.id]);
            let gv = inner.values[gamma.id]
                .clone()
                .into_dimensionality::<Ix1>()
                .unwrap();
            let bv = inner.values[beta.id]
                .clone()
                .into_dimensionality::<Ix1>()
                .unwrap();
            let d = xv.ncols();
            assert_eq!(gv.len(), d, "layer_norm: gamma width");
            assert_eq!(bv.len(), d, "layer_norm: beta width");
            let mut xhat = Array2::<f64>::zeros(xv.raw_dim());
            let mut inv_sigma = Array1::<f64>::zeros(xv.nrows());
            for (i, row) in xv.rows().into_iter().enumerate() {
                let mean = row.sum() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_sigma[i] = inv;
                for (j, v) in row.iter().enumerate() {
                    xhat[(i, j)] = (v - mean) * inv;
                }
            }
            let out = (&xhat * &gv + &bv).into_dyn();
            (out, xhat, inv_sigma)
        };
        self.push(
            value,
            Some(Box::new(move |vals, g, sink| {
                let gm = Self::as2(g);
                let gv = vals[gamma.id]
                    .clone()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                let d = gm.ncols() as f64;
                let mut dx = Array2::<f64>::zeros(gm.raw_dim());
                for (i, grow) in gm.rows().into_iter().enumerate() {
                    let ghat: Vec<f64> = grow
                        .iter()
                        .zip(gv.iter())
                        .map(|(gi, ga)| gi * ga)
                        .collect();
                    let mean_ghat: f64 = ghat.iter().sum::<f64>() / d;
                    let mean_ghat_xhat: f64 = ghat
                        .iter()
                        .zip(xhat.row(i).iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / d;
                    for j in 0..gm.ncols() {
                        dx[(i, j)] = (ghat[j] - mean_ghat - xhat[(i, j)] * mean_ghat_xhat)
                            * inv_sigma[i];
                    }
                }
                sink.add(x.id, dx.into_dyn());
                sink.add(gamma.id, (&gm * &xhat).sum_axis(Axis(0)).into_dyn());
                sink.add(beta.id, gm.sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    // ---- reductions -------------------------------------------------------

    /// Sum of all entries, as a zero-dimensional node.
    pub fn sum(&self, a: Var) -> Var {
        let value = {
            let inner = self.inner.borrow();
            ArrayD::from_elem(ndarray::IxDyn(&[]), inner.values[a.id].sum())
        };
        self.push(
            value,
            Some(Box::new(move |vals, g, sink| {
                let gs = g.iter().next().copied().unwrap();
                sink.add(a.id, ArrayD::from_elem(vals[a.id].raw_dim(), gs));
            })),
        )
    }

    /// Mean of all entries, as a zero-dimensional node.
    pub fn mean(&self, a: Var) -> Var {
        let n = {
            let inner = self.inner.borrow();
            inner.values[a.id].len()
        };
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over rows of a rank-2 node, producing a `1 x n` row vector.
    pub fn mean_rows(&self, a: Var) -> Var {
        let (value, m) = {
            let inner = self.inner.borrow();
            let av = Self::as2(&inner.values[a.id]);
            let m = av.nrows();
            let mean = av.mean_axis(Axis(0)).unwrap();
            (mean.insert_axis(Axis(0)).into_dyn(), m)
        };
        self.push(
            value,
            Some(Box::new(move |vals, g, sink| {
                let gm = Self::as2(g);
                let av = Self::as2(&vals[a.id]);
                let mut dx = Array2::<f64>::zeros(av.raw_dim());
                let scale = 1.0 / m as f64;
                for mut row in dx.rows_mut() {
                    for (j, d) in row.iter_mut().enumerate() {
                        *d = gm[(0, j)] * scale;
                    }
                }
                sink.add(a.id, dx.into_dyn());
            })),
        )
    }

    // ---- slicing and concatenation ----------------------------------------

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let value = {
            let inner = self.inner.borrow();
            let av = Self::as2(&inner.values[a.id]);
            av.slice(ndarray::s![start..start + len, ..]).to_owned().into_dyn()
        };
        self.push(
            value,
            Some(Box::new(move |vals, g, sink| {
                let av = Self::as2(&vals[a.id]);
                let gm = Self::as2(g);
                let mut dx = Array2::<f64>::zeros(av.raw_dim());
                dx.slice_mut(ndarray::s![start..start + len, ..]).assign(&gm);
                sink.add(a.id, dx.into_dyn());
            })),
        )
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let value = {
            let inner = self.inner.borrow();
            let av = Self::as2(&inner.values[a.id]);
            av.slice(ndarray::s![.., start..start + len]).to_owned().into_dyn()
        };
        self.push(
            value,
            Some(Box::new(move |vals, g, sink| {
                let av = Self::as2(&vals[a.id]);
                let gm = Self::as2(g);
                let mut dx = Array2::<f64>::zeros(av.raw_dim());
                dx.slice_mut(ndarray::s![.., start..start + len]).assign(&gm);
                sink.add(a.id, dx.into_dyn());
            })),
        )
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (value, row_counts) = {
            let inner = self.inner.borrow();
            let views: Vec<Array2<f64>> =
                parts.iter().map(|p| Self::as2(&inner.values[p.id])).collect();
            let row_counts: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
            let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
            (
                ndarray::concatenate(Axis(0), &view_refs).unwrap().into_dyn(),
                row_counts,
            )
        };
        let parts = parts.to_vec();
        self.push(
            value,
            Some(Box::new(move |_vals, g, sink| {
                let gm = Self::as2(g);
                let mut offset = 0;
                for (p, rows) in parts.iter().zip(&row_counts) {
                    let part = gm.slice(ndarray::s![offset..offset + rows, ..]).to_owned();
                    sink.add(p.id, part.into_dyn());
                    offset += rows;
                }
            })),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (value, col_counts) = {
            let inner = self.inner.borrow();
            let views: Vec<Array2<f64>> =
                parts.iter().map(|p| Self::as2(&inner.values[p.id])).collect();
            let col_counts: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
            let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
            (
                ndarray::concatenate(Axis(1), &view_refs).unwrap().into_dyn(),
                col_counts,
            )
        };
        let parts = parts.to_vec();
        self.push(
            value,
            Some(Box::new(move |_vals, g, sink| {
                let gm = Self::as2(g);
                let mut offset = 0;
                for (p, cols) in parts.iter().zip(&col_counts) {
                    let part = gm.slice(ndarray::s![.., offset..offset + cols]).to_owned();
                    sink.add(p.id, part.into_dyn());
                    offset += cols;
                }
            })),
        )
    }

    /// Apply a fixed sparse linear map to the rows of a rank-2 node:
    /// `out[i, :] = sum_k w_ik * a[c_ik, :]`. Used for bilinear grid
    /// resampling, spatial shifts, and pooling, which are constant
    /// operators.
    pub fn sparse_apply(&self, a: Var, op: &SparseLinear) -> Var {
        let value = {
            let inner = self.inner.borrow();
            let av = Self::as2(&inner.values[a.id]);
            op.apply(&av).into_dyn()
        };
        let op = op.clone();
        self.push(
            value,
            Some(Box::new(move |vals, g, sink| {
                let av = Self::as2(&vals[a.id]);
                let gm = Self::as2(g);
                sink.add(a.id, op.apply_transpose(&gm, av.nrows()).into_dyn());
            })),
        )
    }

    /// Record an op with one differentiable input and an externally
    /// computed value. `back(a_value, grad_out)` must return the gradient
    /// with respect to `a`. Lets loss kernels live outside this module.
    pub fn custom_unary<F>(&self, a: Var, value: ArrayD<f64>, back: F) -> Var
    where
        F: Fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64> + 'static,
    {
        self.push(
            value,
            Some(Box::new(move |vals, g, sink| {
                sink.add(a.id, back(&vals[a.id], g));
            })),
        )
    }

    // ---- loss kernels -------------------------------------------------------

    /// Mean over rows of `1 - cos(r_i, t_i)` against a constant target.
    /// Errors on any zero-norm row, naming the offending token.
    pub fn cosine_mean(&self, r: Var, target: &Array2<f64>) -> Result<Var> {
        let (value, rv) = {
            let inner = self.inner.borrow();
            let rv = Self::as2(&inner.values[r.id]);
            if rv.raw_dim() != target.raw_dim() {
                return Err(Error::config(format!(
                    "cosine_mean: shape mismatch {:?} vs {:?}",
                    rv.shape(),
                    target.shape()
                )));
            }
            let mut total = 0.0;
            for (i, (rrow, trow)) in rv.rows().into_iter().zip(target.rows()).enumerate() {
                let rn = rrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                let tn = trow.iter().map(|v| v * v).sum::<f64>().sqrt();
                if rn == 0.0 || tn == 0.0 {
                    return Err(Error::numeric(format!(
                        "cosine_mean: zero-norm token at row {i}"
                    )));
                }
                let dot: f64 = rrow.iter().zip(trow.iter()).map(|(a, b)| a * b).sum();
                total += 1.0 - dot / (rn * tn);
            }
            let n = rv.nrows() as f64;
            (
                ArrayD::from_elem(ndarray::IxDyn(&[]), total / n),
                rv,
            )
        };
        let target = target.clone();
        Ok(self.push(
            value,
            Some(Box::new(move |_vals, g, sink| {
                let gs = g.iter().next().copied().unwrap();
                let n = rv.nrows() as f64;
                let mut dr = Array2::<f64>::zeros(rv.raw_dim());
                for (i, (rrow, trow)) in rv.rows().into_iter().zip(target.rows()).enumerate() {
                    let rn = rrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let tn = trow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = rrow.iter().zip(trow.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..rv.ncols() {
                        // d/dr of -cos(r, t), scaled by 1/n.
                        dr[(i, j)] = -(trow[j] / (rn * tn) - dot * rrow[j] / (rn * rn * rn * tn))
                            * gs
                            / n;
                    }
                }
                sink.add(r.id, dr.into_dyn());
            })),
        ))
    }

    /// Mean over all entries of the Huber penalty of `r - target`.
    pub fn smooth_l1_mean(&self, r: Var, target: &Array2<f64>, delta: f64) -> Result<Var> {
        let (value, rv) = {
            let inner = self.inner.borrow();
            let rv = Self::as2(&inner.values[r.id]);
            if rv.raw_dim() != target.raw_dim() {
                return Err(Error::config(format!(
                    "smooth_l1_mean: shape mismatch {:?} vs {:?}",
                    rv.shape(),
                    target.shape()
                )));
            }
            let mut total = 0.0;
            for (a, b) in rv.iter().zip(target.iter()) {
                let x = a - b;
                total += if x.abs() < delta {
                    0.5 * x * x / delta
                } else {
                    x.abs() - 0.5 * delta
                };
            }
            let count = rv.len() as f64;
            (
                ArrayD::from_elem(ndarray::IxDyn(&[]), total / count),
                rv,
            )
        };
        let target = target.clone();
        Ok(self.push(
            value,
            Some(Box::new(move |_vals, g, sink| {
                let gs = g.iter().next().copied().unwrap();
                let count = rv.len() as f64;
                let mut dr = Array2::<f64>::zeros(rv.raw_dim());
                for ((d, a), b) in dr.iter_mut().zip(rv.iter()).zip(target.iter()) {
                    let x = a - b;
                    *d = gs * (x / delta).clamp(-1.0, 1.0) / count;
                }
                sink.add(r.id, dr.into_dyn());
            })),
        ))
    }
}

// ---- scalar math helpers ----------------------------------------------------

const FRAC_1_SQRT_2PI: f64 = 0.3989422804014327;

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// GELU, exact error-function form.
pub fn gelu_exact(x: f64) -> f64 {
    x * norm_cdf(x)
}

/// Derivative of exact GELU.
pub fn gelu_exact_grad(x: f64) -> f64 {
    norm_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
