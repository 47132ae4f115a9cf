//! Reverse-mode autodiff over 2-D tensors.
//!
//! A [`Tape`] records eagerly-evaluated ops over row-major matrices; calling
//! [`Tape::backward`] on a 1x1 loss node walks the record in reverse and
//! accumulates vector-Jacobian products into every contributing node.
//! Node indices are topologically ordered by construction, so the reverse
//! index order is a valid reverse-topological order.

use std::sync::Arc;

use ndarray::{Array2, Axis};

use super::Real;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<R: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// x (B x N) + row (1 x N) broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, R),
    /// A (m x k) @ B (k x n).
    MatMul(Var, Var),
    /// A (m x k) @ B (n x k)^T.
    MatMulNT(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Clamp(Var, R, R),
    Minimum(Var, Var),
    /// Row-wise softmax; masked-out columns get probability exactly 0.
    SoftmaxRows(Var, Option<Arc<Vec<bool>>>),
    LogSoftmaxRows(Var),
    /// Row-wise normalization followed by gain/bias (both 1 x N).
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    /// y row r = x row idx[r].
    GatherRows {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    /// y (B x 1) with y[r] = x[r, idx[r]].
    GatherCols {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    SumRows(Var),
    SumAll(Var),
    MeanAll(Var),
    /// Elementwise product with a constant (no gradient into the constant).
    MulConst(Var, Arc<Array2<R>>),
    /// Zero every row whose `keep` flag is false.
    MaskRows(Var, Arc<Vec<bool>>),
    /// Per-element binary cross-entropy on logits against constant targets.
    BceWithLogits {
        logits: Var,
        targets: Arc<Array2<R>>,
    },
    /// Row-major reinterpretation to a new (rows, cols).
    Reshape(Var),
    /// Mean over groups of `group` consecutive rows: (B*group x N) -> (B x N).
    MeanRowGroups {
        x: Var,
        group: usize,
    },
}

struct Node<R: Real> {
    value: Arc<Array2<R>>,
    op: Op<R>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Gradients produced by [`Tape::backward`].
pub struct Grads<R: Real> {
    g: Vec<Option<Array2<R>>>,
}

impl<R: Real> Grads<R> {
    /// Gradient of the loss w.r.t. `v`, if `v` contributed to the loss.
    pub fn get(&self, v: Var) -> Option<&Array2<R>> {
        self.g[v.0].as_ref()
    }
}

pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims<R: Real>(a: &Array2<R>) -> Vec<usize> {
    vec![a.nrows(), a.ncols()]
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Array2<R> {
        &self.nodes[v.0].value
    }

    /// Shared handle to a node's value.
    pub fn value_arc(&self, v: Var) -> Arc<Array2<R>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> R {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<R>, op: Op<R>) -> Var {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&mut self, value: Arc<Array2<R>>, op: Op<R>) -> Var {
        if cfg!(debug_assertions) {
            debug_assert!(
                value.iter().all(|x| x.is_finite()),
                "non-finite tensor produced on tape (node {})",
                self.nodes.len()
            );
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert a shared array as a leaf (parameter or constant input).
    pub fn leaf(&mut self, value: Arc<Array2<R>>) -> Var {
        self.push_shared(value, Op::Leaf)
    }

    /// Insert an owned array as a leaf.
    pub fn leaf_owned(&mut self, value: Array2<R>) -> Var {
        self.push(value, Op::Leaf)
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: dims(va),
                rhs: dims(vb),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let y = self.value(a) + self.value(b);
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let y = self.value(a) - self.value(b);
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let y = self.value(a) * self.value(b);
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != vx.ncols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: dims(vx),
                rhs: dims(vr),
            });
        }
        let y = vx + vr;
        Ok(self.push(y, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, c: R) -> Var {
        let y = self.value(x).mapv(|v| v * c);
        self.push(y, Op::Scale(x, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: dims(va),
                rhs: dims(vb),
            });
        }
        let y = va.dot(vb);
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    /// `a @ b^T` without materializing the transpose as a node.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: dims(va),
                rhs: dims(vb),
            });
        }
        let y = va.dot(&vb.t());
        Ok(self.push(y, Op::MatMulNT(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| if v > R::zero() { v } else { R::zero() });
        self.push(y, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.tanh());
        self.push(y, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = R::one();
        let y = self.value(x).mapv(|v| one / (one + (-v).exp()));
        self.push(y, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.exp());
        self.push(y, Op::Exp(x))
    }

    pub fn clamp(&mut self, x: Var, lo: R, hi: R) -> Var {
        let y = self.value(x).mapv(|v| if v < lo { lo } else if v > hi { hi } else { v });
        self.push(y, Op::Clamp(x, lo, hi))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("minimum", a, b)?;
        let mut y = self.value(a).clone();
        y.zip_mut_with(self.value(b), |u, &v| {
            if v < *u {
                *u = v;
            }
        });
        Ok(self.push(y, Op::Minimum(a, b)))
    }

    /// Row-wise softmax. With a mask, only `true` columns participate; the
    /// rest get probability exactly zero and contribute no gradient.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let vx = self.value(x);
        if let Some(m) = &mask {
            if m.len() != vx.ncols() {
                return Err(Error::ShapeMismatch {
                    op: "softmax_rows(mask)",
                    lhs: dims(vx),
                    rhs: vec![m.len()],
                });
            }
            if !m.iter().any(|&k| k) {
                return Err(Error::Invalid("softmax: all key positions masked".into()));
            }
        }
        let y = softmax_masked(vx, mask.as_deref());
        Ok(self.push(y, Op::SoftmaxRows(x, mask)))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut y = vx.clone();
        for mut row in y.outer_iter_mut() {
            let max = row.iter().cloned().fold(R::neg_infinity(), R::max);
            let mut sum = R::zero();
            for v in row.iter() {
                sum = sum + (*v - max).exp();
            }
            let lse = max + sum.ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(y, Op::LogSoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let n = vx.ncols();
        if vg.dim() != (1, n) || vb.dim() != (1, n) {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: dims(vx),
                rhs: dims(vg),
            });
        }
        let eps = R::of(LAYER_NORM_EPS);
        let mut y = vx.clone();
        for mut row in y.outer_iter_mut() {
            let (mu, sd) = row_mean_std(row.as_slice().unwrap(), eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) / sd * vg[[0, j]] + vb[[0, j]];
            }
        }
        Ok(self.push(y, Op::LayerNorm { x, gain, bias }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Invalid(format!("concat_cols: {e}")))?;
        Ok(self.push(y, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let y = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Invalid(format!("concat_rows: {e}")))?;
        Ok(self.push(y, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if start + len > vx.ncols() {
            return Err(Error::Invalid(format!(
                "slice_cols: {}..{} out of {} columns",
                start,
                start + len,
                vx.ncols()
            )));
        }
        let y = vx.slice(ndarray::s![.., start..start + len]).to_owned();
        Ok(self.push(y, Op::SliceCols { x, start }))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= vx.nrows()) {
            return Err(Error::Invalid(format!(
                "gather_rows: index {bad} out of {} rows",
                vx.nrows()
            )));
        }
        let mut y = Array2::zeros((idx.len(), vx.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            y.row_mut(r).assign(&vx.row(i));
        }
        Ok(self.push(y, Op::GatherRows { x, idx }))
    }

    pub fn gather_cols(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let vx = self.value(x);
        if idx.len() != vx.nrows() {
            return Err(Error::ShapeMismatch {
                op: "gather_cols",
                lhs: dims(vx),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= vx.ncols()) {
            return Err(Error::Invalid(format!(
                "gather_cols: index {bad} out of {} columns",
                vx.ncols()
            )));
        }
        let mut y = Array2::zeros((vx.nrows(), 1));
        for (r, &i) in idx.iter().enumerate() {
            y[[r, 0]] = vx[[r, i]];
        }
        Ok(self.push(y, Op::GatherCols { x, idx }))
    }

    pub fn sum_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.sum_axis(Axis(1));
        let y = s.insert_axis(Axis(1));
        self.push(y, Op::SumRows(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = R::of((vx.nrows() * vx.ncols()) as f64);
        let s = vx.sum() / n;
        self.push(Array2::from_elem((1, 1), s), Op::MeanAll(x))
    }

    pub fn mul_const(&mut self, x: Var, c: Arc<Array2<R>>) -> Result<Var> {
        let vx = self.value(x);
        if vx.dim() != c.dim() {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                lhs: dims(vx),
                rhs: dims(&c),
            });
        }
        let y = vx * &*c;
        Ok(self.push(y, Op::MulConst(x, c)))
    }

    pub fn mask_rows(&mut self, x: Var, keep: Arc<Vec<bool>>) -> Result<Var> {
        let vx = self.value(x);
        if keep.len() != vx.nrows() {
            return Err(Error::ShapeMismatch {
                op: "mask_rows",
                lhs: dims(vx),
                rhs: vec![keep.len()],
            });
        }
        let mut y = vx.clone();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                y.row_mut(r).fill(R::zero());
            }
        }
        Ok(self.push(y, Op::MaskRows(x, keep)))
    }

    /// Numerically stable per-element BCE on logits: the loss is
    /// `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<Array2<R>>) -> Result<Var> {
        let vz = self.value(logits);
        if vz.dim() != targets.dim() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: dims(vz),
                rhs: dims(&targets),
            });
        }
        let mut y = vz.clone();
        y.zip_mut_with(&targets, |z, &t| {
            let pos = if *z > R::zero() { *z } else { R::zero() };
            *z = pos - *z * t + (R::one() + (-z.abs()).exp()).ln();
        });
        Ok(self.push(y, Op::BceWithLogits { logits, targets }))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: dims(vx),
                rhs: vec![rows, cols],
            });
        }
        let data: Vec<R> = vx.iter().cloned().collect();
        let y = Array2::from_shape_vec((rows, cols), data).expect("checked size");
        Ok(self.push(y, Op::Reshape(x)))
    }

    /// Mean over groups of `group` consecutive rows.
    pub fn mean_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let vx = self.value(x);
        if group == 0 || vx.nrows() % group != 0 {
            return Err(Error::Invalid(format!(
                "mean_row_groups: {} rows not divisible by group {group}",
                vx.nrows()
            )));
        }
        let out_rows = vx.nrows() / group;
        let inv = R::one() / R::of(group as f64);
        let mut y = Array2::zeros((out_rows, vx.ncols()));
        for r in 0..out_rows {
            for j in 0..group {
                let src = vx.row(r * group + j);
                y.row_mut(r).zip_mut_with(&src, |a, &b| *a = *a + b * inv);
            }
        }
        Ok(self.push(y, Op::MeanRowGroups { x, group }))
    }

    /// Reverse pass from a 1x1 loss node.
    pub fn backward(&self, loss: Var) -> Result<Grads<R>> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(Error::Invalid(format!(
                "backward requires a 1x1 loss node, got {:?}",
                dims(lv)
            )));
        }
        let mut g: Vec<Option<Array2<R>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(Array2::from_elem((1, 1), R::one()));

        for i in (0..=loss.0).rev() {
            let gy = match g[i].take() {
                Some(gy) => gy,
                None => continue,
            };
            self.accumulate(i, &gy, &mut g);
            g[i] = Some(gy);
        }
        Ok(Grads { g })
    }

    fn accumulate(&self, i: usize, gy: &Array2<R>, g: &mut [Option<Array2<R>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_grad(g, *a, gy.clone(), self);
                add_grad(g, *b, gy.clone(), self);
            }
            Op::Sub(a, b) => {
                add_grad(g, *a, gy.clone(), self);
                add_grad(g, *b, gy.mapv(|v| -v), self);
            }
            Op::Mul(a, b) => {
                add_grad(g, *a, gy * self.value(*b), self);
                add_grad(g, *b, gy * self.value(*a), self);
            }
            Op::AddRow(x, row) => {
                add_grad(g, *x, gy.clone(), self);
                let gr = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                add_grad(g, *row, gr, self);
            }
            Op::Scale(x, c) => add_grad(g, *x, gy.mapv(|v| v * *c), self),
            Op::MatMul(a, b) => {
                add_grad(g, *a, gy.dot(&self.value(*b).t()), self);
                add_grad(g, *b, self.value(*a).t().dot(gy), self);
            }
            Op::MatMulNT(a, b) => {
                add_grad(g, *a, gy.dot(self.value(*b)), self);
                add_grad(g, *b, gy.t().dot(self.value(*a)), self);
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let mut gx = gy.clone();
                gx.zip_mut_with(vx, |gv, &xv| {
                    if xv <= R::zero() {
                        *gv = R::zero();
                    }
                });
                add_grad(g, *x, gx, self);
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let gx = gy * &y.mapv(|v| R::one() - v * v);
                add_grad(g, *x, gx, self);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let gx = gy * &y.mapv(|v| v * (R::one() - v));
                add_grad(g, *x, gx, self);
            }
            Op::Exp(x) => {
                add_grad(g, *x, gy * &**node.value_ref(), self);
            }
            Op::Clamp(x, lo, hi) => {
                let vx = self.value(*x);
                let mut gx = gy.clone();
                gx.zip_mut_with(vx, |gv, &xv| {
                    if xv < *lo || xv > *hi {
                        *gv = R::zero();
                    }
                });
                add_grad(g, *x, gx, self);
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut ga = gy.clone();
                let mut gb = gy.clone();
                ndarray::Zip::from(&mut ga)
                    .and(&mut gb)
                    .and(va)
                    .and(vb)
                    .for_each(|ga, gb, &xa, &xb| {
                        // ties route to the first argument
                        if xa <= xb {
                            *gb = R::zero();
                        } else {
                            *ga = R::zero();
                        }
                    });
                add_grad(g, *a, ga, self);
                add_grad(g, *b, gb, self);
            }
            Op::SoftmaxRows(x, mask) => {
                let y = &node.value;
                let mut gx = Array2::zeros(gy.dim());
                for r in 0..gy.nrows() {
                    let mut dot = R::zero();
                    for c in 0..gy.ncols() {
                        dot = dot + gy[[r, c]] * y[[r, c]];
                    }
                    for c in 0..gy.ncols() {
                        let masked = mask.as_ref().is_some_and(|m| !m[c]);
                        if !masked {
                            gx[[r, c]] = y[[r, c]] * (gy[[r, c]] - dot);
                        }
                    }
                }
                add_grad(g, *x, gx, self);
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = gy.clone();
                for r in 0..gy.nrows() {
                    let gsum: R = gy.row(r).iter().fold(R::zero(), |acc, &v| acc + v);
                    for c in 0..gy.ncols() {
                        gx[[r, c]] = gy[[r, c]] - y[[r, c]].exp() * gsum;
                    }
                }
                add_grad(g, *x, gx, self);
            }
            Op::LayerNorm { x, gain, bias } => {
                let vx = self.value(*x);
                let vg = self.value(*gain);
                let eps = R::of(LAYER_NORM_EPS);
                let n = vx.ncols();
                let rn = R::of(n as f64);
                let mut gx = Array2::zeros(vx.dim());
                let mut ggain = Array2::zeros((1, n));
                let mut gbias = Array2::zeros((1, n));
                for r in 0..vx.nrows() {
                    let row = vx.row(r);
                    let (mu, sd) = row_mean_std(row.as_slice().unwrap(), eps);
                    // x_hat, gxhat, and their means
                    let mut mean_gxh = R::zero();
                    let mut mean_gxh_xh = R::zero();
                    let mut xh = vec![R::zero(); n];
                    let mut gxh = vec![R::zero(); n];
                    for c in 0..n {
                        xh[c] = (row[c] - mu) / sd;
                        gxh[c] = gy[[r, c]] * vg[[0, c]];
                        mean_gxh = mean_gxh + gxh[c];
                        mean_gxh_xh = mean_gxh_xh + gxh[c] * xh[c];
                        ggain[[0, c]] = ggain[[0, c]] + gy[[r, c]] * xh[c];
                        gbias[[0, c]] = gbias[[0, c]] + gy[[r, c]];
                    }
                    mean_gxh = mean_gxh / rn;
                    mean_gxh_xh = mean_gxh_xh / rn;
                    for c in 0..n {
                        gx[[r, c]] = (gxh[c] - mean_gxh - xh[c] * mean_gxh_xh) / sd;
                    }
                }
                add_grad(g, *x, gx, self);
                add_grad(g, *gain, ggain, self);
                add_grad(g, *bias, gbias, self);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    let gp = gy.slice(ndarray::s![.., start..start + w]).to_owned();
                    add_grad(g, *p, gp, self);
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    let gp = gy.slice(ndarray::s![start..start + h, ..]).to_owned();
                    add_grad(g, *p, gp, self);
                    start += h;
                }
            }
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let mut gx = Array2::zeros(vx.dim());
                gx.slice_mut(ndarray::s![.., *start..*start + gy.ncols()])
                    .assign(gy);
                add_grad(g, *x, gx, self);
            }
            Op::GatherRows { x, idx } => {
                let vx = self.value(*x);
                let mut gx = Array2::zeros(vx.dim());
                for (r, &i) in idx.iter().enumerate() {
                    gx.row_mut(i).zip_mut_with(&gy.row(r), |a, &b| *a = *a + b);
                }
                add_grad(g, *x, gx, self);
            }
            Op::GatherCols { x, idx } => {
                let vx = self.value(*x);
                let mut gx = Array2::zeros(vx.dim());
                for (r, &i) in idx.iter().enumerate() {
                    gx[[r, i]] = gx[[r, i]] + gy[[r, 0]];
                }
                add_grad(g, *x, gx, self);
            }
            Op::SumRows(x) => {
                let vx = self.value(*x);
                let mut gx = Array2::zeros(vx.dim());
                for r in 0..vx.nrows() {
                    let gr = gy[[r, 0]];
                    gx.row_mut(r).fill(gr);
                }
                add_grad(g, *x, gx, self);
            }
            Op::SumAll(x) => {
                let vx = self.value(*x);
                let gx = Array2::from_elem(vx.dim(), gy[[0, 0]]);
                add_grad(g, *x, gx, self);
            }
            Op::MeanAll(x) => {
                let vx = self.value(*x);
                let n = R::of((vx.nrows() * vx.ncols()) as f64);
                let gx = Array2::from_elem(vx.dim(), gy[[0, 0]] / n);
                add_grad(g, *x, gx, self);
            }
            Op::MulConst(x, c) => add_grad(g, *x, gy * &**c, self),
            Op::MaskRows(x, keep) => {
                let mut gx = gy.clone();
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        gx.row_mut(r).fill(R::zero());
                    }
                }
                add_grad(g, *x, gx, self);
            }
            Op::BceWithLogits { logits, targets } => {
                let vz = self.value(*logits);
                let one = R::one();
                let mut gx = gy.clone();
                ndarray::Zip::from(&mut gx)
                    .and(vz)
                    .and(&**targets)
                    .for_each(|gv, &z, &t| {
                        let s = one / (one + (-z).exp());
                        *gv = *gv * (s - t);
                    });
                add_grad(g, *logits, gx, self);
            }
            Op::Reshape(x) => {
                let vx = self.value(*x);
                let data: Vec<R> = gy.iter().cloned().collect();
                let gx = Array2::from_shape_vec(vx.dim(), data).expect("same size");
                add_grad(g, *x, gx, self);
            }
            Op::MeanRowGroups { x, group } => {
                let vx = self.value(*x);
                let inv = R::one() / R::of(*group as f64);
                let mut gx = Array2::zeros(vx.dim());
                for r in 0..gy.nrows() {
                    for j in 0..*group {
                        let mut dst = gx.row_mut(r * group + j);
                        dst.zip_mut_with(&gy.row(r), |a, &b| *a = b * inv);
                    }
                }
                add_grad(g, *x, gx, self);
            }
        }
    }
}

impl<R: Real> Node<R> {
    fn value_ref(&self) -> &Arc<Array2<R>> {
        &self.value
    }
}

fn add_grad<R: Real>(g: &mut [Option<Array2<R>>], v: Var, contribution: Array2<R>, _t: &Tape<R>) {
    match &mut g[v.0] {
        Some(acc) => acc.zip_mut_with(&contribution, |a, &b| *a = *a + b),
        slot @ None => *slot = Some(contribution),
    }
}

fn row_mean_std<R: Real>(row: &[R], eps: R) -> (R, R) {
    let n = R::of(row.len() as f64);
    let mut mu = R::zero();
    for &v in row {
        mu = mu + v;
    }
    mu = mu / n;
    let mut var = R::zero();
    for &v in row {
        let d = v - mu;
        var = var + d * d;
    }
    var = var / n;
    (mu, (var + eps).sqrt())
}

fn softmax_masked<R: Real>(x: &Array2<R>, mask: Option<&Vec<bool>>) -> Array2<R> {
    let mut y = Array2::zeros(x.dim());
    for r in 0..x.nrows() {
        let mut max = R::neg_infinity();
        for c in 0..x.ncols() {
            if mask.is_none_or(|m| m[c]) && x[[r, c]] > max {
                max = x[[r, c]];
            }
        }
        let mut sum = R::zero();
        for c in 0..x.ncols() {
            if mask.is_none_or(|m| m[c]) {
                let e = (x[[r, c]] - max).exp();
                y[[r, c]] = e;
                sum = sum + e;
            }
        }
        for c in 0..x.ncols() {
            if mask.is_none_or(|m| m[c]) {
                y[[r, c]] = y[[r, c]] / sum;
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_of_constant_vector_is_uniform() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf_owned(Array2::from_elem((1, 5), 3.25));
        let y = t.softmax_rows(x, None).unwrap();
        for v in t.value(y).iter() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_nonnegative() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf_owned(array![[0.3, -2.0, 5.0, 0.0], [1.0, 1.0, -1.0, 2.5]]);
        let y = t.softmax_rows(x, None).unwrap();
        for row in t.value(y).outer_iter() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn masked_softmax_rejects_all_masked() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf_owned(Array2::zeros((1, 3)));
        let err = t.softmax_rows(x, Some(Arc::new(vec![false, false, false])));
        assert!(err.is_err());
    }

    #[test]
    fn masked_rows_are_bitwise_invariant() {
        let mask = Arc::new(vec![true, false, true]);
        let run = |poison: f64| {
            let mut t: Tape<f64> = Tape::new();
            let kv = t.leaf_owned(array![[1.0, 2.0], [poison, poison], [0.5, -0.5]]);
            let kvz = t.mask_rows(kv, Arc::clone(&mask)).unwrap();
            let q = t.leaf_owned(array![[0.7, -0.3]]);
            let scores = t.matmul_nt(q, kvz).unwrap();
            let w = t.softmax_rows(scores, Some(Arc::clone(&mask))).unwrap();
            let out = t.matmul(w, kvz).unwrap();
            t.value(out).clone()
        };
        let a = run(1234.5);
        let b = run(-9.75);
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf_owned(Array2::zeros((2, 3)));
        let b = t.leaf_owned(Array2::zeros((3, 2)));
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn backward_through_sum_of_products() {
        // loss = sum(a * b) -> dL/da = b, dL/db = a
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf_owned(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = t.leaf_owned(array![[5.0, 6.0], [7.0, 8.0]]);
        let p = t.mul(a, b).unwrap();
        let loss = t.sum_all(p);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), t.value(b));
        assert_eq!(g.get(b).unwrap(), t.value(a));
    }

    #[test]
    fn minimum_routes_gradient_to_smaller_side() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf_owned(array![[1.0, 5.0]]);
        let b = t.leaf_owned(array![[2.0, 3.0]]);
        let m = t.minimum(a, b).unwrap();
        let loss = t.sum_all(m);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), &array![[1.0, 0.0]]);
        assert_eq!(g.get(b).unwrap(), &array![[0.0, 1.0]]);
    }

    #[test]
    fn reshape_round_trips_gradient() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf_owned(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let r = t.reshape(a, 3, 2).unwrap();
        let s = t.sum_all(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().dim(), (2, 3));
    }
}
