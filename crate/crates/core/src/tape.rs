//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] seeds the adjoint of a scalar output and replays the
//! nodes in exact reverse recording order, accumulating adjoints into each
//! operand. Softmax and sparsemax carry hand-written vector-Jacobian
//! products; everything else is plain matrix calculus.
//!
//! ```
//! use adhoc_fusion::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let p = tape.leaf(Matrix::row_vector(&[1.0, -2.0, 3.0]).unwrap());
//! let loss = tape.sum_squares(p);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(p).unwrap().as_slice(), &[2.0, -4.0, 6.0]);
//! ```

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::normalize::Normalizer;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Overflow anywhere in a forward pass surfaces here rather than as NaN
/// gradients later.
fn finite(value: Matrix, op: &Op) -> Result<Matrix> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric(format!("non-finite value produced by {op:?}")))
    }
}

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    /// Matrix times a 1x1 variable.
    ScaleBy(Var, Var),
    /// Matrix plus a 1x1 variable.
    AddScalar(Var, Var),
    Relu(Var),
    RowNormalize(Var, Normalizer),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    L2NormalizeRows(Var),
    CrossEntropyDiag(Var),
    Sum(Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Recorded values may borrow from the caller (`'a`), so parameters can be
/// placed on many tapes without copying.
#[derive(Debug)]
pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Drops every recorded node. Handles issued before the clear are
    /// rejected afterwards.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (a trainable parameter or an input whose
    /// gradient is wanted).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Like [`Tape::leaf`] without copying `value`.
    pub fn leaf_ref(&mut self, value: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage(
                "variable is not recorded on this tape (cleared or foreign)".into(),
            ));
        }
        Ok(())
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    fn unary(&mut self, a: Var, f: impl FnOnce(&Matrix) -> Result<Matrix>, op: Op) -> Result<Var> {
        self.check(a)?;
        let value = finite(f(&self.nodes[a.index].value)?, &op)?;
        let rg = self.needs(&[a]);
        Ok(self.push(Cow::Owned(value), op, rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl FnOnce(&Matrix, &Matrix) -> Result<Matrix>,
        op: Op,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = finite(f(&self.nodes[a.index].value, &self.nodes[b.index].value)?, &op)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Cow::Owned(value), op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.matmul(y), Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.matmul_t(y), Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(x.transpose()), Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.add(y), Op::Add(a, b))
    }

    /// Adds a `1 x n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.binary(a, bias, |x, y| x.add_row(y), Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, |x| Ok(x.scale(s)), Op::Scale(a, s))
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.binary(
            a,
            s,
            |x, y| Ok(x.scale(y.item()?)),
            Op::ScaleBy(a, s),
        )
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.binary(
            a,
            s,
            |x, y| {
                let c = y.item()?;
                Ok(x.map(|v| v + c))
            },
            Op::AddScalar(a, s),
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(x.relu()), Op::Relu(a))
    }

    pub fn row_normalize(&mut self, a: Var, mode: Normalizer) -> Result<Var> {
        self.unary(
            a,
            |x| crate::normalize::row_normalize(x, mode),
            Op::RowNormalize(a, mode),
        )
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Matrix::mean_rows, Op::MeanRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let mats: Vec<&Matrix> = parts.iter().map(|p| &*self.nodes[p.index].value).collect();
        let value = Matrix::concat_cols(&mats)?;
        let rg = self.needs(parts);
        Ok(self.push(Cow::Owned(value), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let mats: Vec<&Matrix> = parts.iter().map(|p| &*self.nodes[p.index].value).collect();
        let value = Matrix::concat_rows(&mats)?;
        let rg = self.needs(parts);
        Ok(self.push(Cow::Owned(value), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Scales every row to unit Euclidean norm. Zero rows are an error.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |x| {
                let mut out = x.clone();
                for r in 0..x.rows() {
                    let norm = dot(x.row(r), x.row(r)).sqrt();
                    if norm < 1e-12 {
                        return Err(Error::Numeric(format!(
                            "zero-norm row {r} in cosine similarity"
                        )));
                    }
                    out.row_mut(r).iter_mut().for_each(|v| *v /= norm);
                }
                Ok(out)
            },
            Op::L2NormalizeRows(a),
        )
    }

    /// Mean over rows `j` of `-log softmax(S_j)_j` for a square logit matrix.
    pub fn cross_entropy_diag(&mut self, logits: Var) -> Result<Var> {
        self.unary(
            logits,
            |s| {
                if s.rows() != s.cols() || s.rows() == 0 {
                    return Err(Error::contract(format!(
                        "cross entropy needs a nonempty square logit matrix, got {}x{}",
                        s.rows(),
                        s.cols()
                    )));
                }
                let mut total = 0.0;
                for j in 0..s.rows() {
                    let row = s.row(j);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    total += lse - row[j];
                }
                Ok(Matrix::scalar(total / s.rows() as f64))
            },
            Op::CrossEntropyDiag(logits),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.unary(a, |x| Ok(Matrix::scalar(x.sum())), Op::Sum(a))
            .expect("sum of a recorded variable")
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| Ok(Matrix::scalar(dot(x.as_slice(), x.as_slice()))),
            Op::SumSquares(a),
        )
        .expect("sum_squares of a recorded variable")
    }

    /// Gradient of a scalar output with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.nodes[loss.index].value.shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {:?}",
                self.nodes[loss.index].value.shape()
            )));
        }
        self.backward_with_seed(loss, Matrix::scalar(1.0))
    }

    /// Propagates an arbitrary upstream adjoint `seed` from `output`.
    pub fn backward_with_seed(&self, output: Var, seed: Matrix) -> Result<Gradients> {
        self.check(output)?;
        if seed.shape() != self.nodes[output.index].value.shape() {
            return Err(Error::contract("seed shape differs from output shape"));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.index + 1];
        grads[output.index] = Some(seed);

        for index in (0..=output.index).rev() {
            let node = &self.nodes[index];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[index].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[index] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Matrix,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        let val = |v: &Var| &*self.nodes[v.index].value;
        let mut acc = |v: &Var, delta: Matrix| -> Result<()> {
            if !self.nodes[v.index].requires_grad {
                return Ok(());
            }
            match &mut grads[v.index] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        let wants = |v: &Var| self.nodes[v.index].requires_grad;

        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(a) {
                    acc(a, g.matmul_t(val(b))?)?;
                }
                if wants(b) {
                    acc(b, val(a).t_matmul(g)?)?;
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if wants(a) {
                    acc(a, g.matmul(val(b))?)?;
                }
                if wants(b) {
                    acc(b, g.t_matmul(val(a))?)?;
                }
            }
            Op::Transpose(a) => acc(a, g.transpose())?,
            Op::Add(a, b) => {
                acc(a, g.clone())?;
                acc(b, g.clone())?;
            }
            Op::AddRow(a, bias) => {
                acc(a, g.clone())?;
                if wants(bias) {
                    let mut col_sums = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (s, &v) in col_sums.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    acc(bias, col_sums)?;
                }
            }
            Op::Scale(a, s) => acc(a, g.scale(*s))?,
            Op::ScaleBy(a, s) => {
                let factor = val(s).item()?;
                if wants(a) {
                    acc(a, g.scale(factor))?;
                }
                if wants(s) {
                    acc(s, Matrix::scalar(dot(g.as_slice(), val(a).as_slice())))?;
                }
            }
            Op::AddScalar(a, s) => {
                acc(a, g.clone())?;
                acc(s, Matrix::scalar(g.sum()))?;
            }
            Op::Relu(a) => {
                // subgradient at exactly zero is zero
                let mask = val(a).zip_with(g, |x, gv| if x > 0.0 { gv } else { 0.0 })?;
                acc(a, mask)?;
            }
            Op::RowNormalize(a, mode) => {
                let mut da = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let row = mode.vjp(out.row(r), g.row(r));
                    da.row_mut(r).copy_from_slice(&row);
                }
                acc(a, da)?;
            }
            Op::MeanRows(a) => {
                let rows = val(a).rows();
                let inv = 1.0 / rows as f64;
                let mut da = Matrix::zeros(rows, g.cols());
                for r in 0..rows {
                    for (d, &v) in da.row_mut(r).iter_mut().zip(g.as_slice()) {
                        *d = v * inv;
                    }
                }
                acc(a, da)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let width = val(p).cols();
                    if wants(p) {
                        acc(p, g.slice_cols(start, width)?)?;
                    }
                    start += width;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let (rows, cols) = val(p).shape();
                    if wants(p) {
                        let slice = g.as_slice()[start * cols..(start + rows) * cols].to_vec();
                        acc(p, Matrix::from_vec(rows, cols, slice)?)?;
                    }
                    start += rows;
                }
            }
            Op::L2NormalizeRows(a) => {
                let x = val(a);
                let mut da = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = dot(x.row(r), x.row(r)).sqrt();
                    let y = out.row(r);
                    let gy = dot(y, g.row(r));
                    for ((d, &yi), &gi) in da.row_mut(r).iter_mut().zip(y).zip(g.row(r)) {
                        *d = (gi - yi * gy) / norm;
                    }
                }
                acc(a, da)?;
            }
            Op::CrossEntropyDiag(s) => {
                let logits = val(s);
                let n = logits.rows();
                let upstream = g.item()? / n as f64;
                let mut ds = Matrix::zeros(n, n);
                for j in 0..n {
                    let p = crate::normalize::softmax(logits.row(j));
                    for (k, (d, pk)) in ds.row_mut(j).iter_mut().zip(p).enumerate() {
                        let target = if k == j { 1.0 } else { 0.0 };
                        *d = (pk - target) * upstream;
                    }
                }
                acc(s, ds)?;
            }
            Op::Sum(a) => {
                let x = val(a);
                acc(a, Matrix::filled(x.rows(), x.cols(), g.item()?))?;
            }
            Op::SumSquares(a) => {
                let factor = 2.0 * g.item()?;
                acc(a, val(a).scale(factor))?;
            }
        }
        Ok(())
    }
}

/// Adjoints produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when `v` does not influence the output (or is not on the tape).
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// The gradient of `v`, or zeros of the given shape when `v` did not
    /// contribute.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(rows, cols))
    }
}
