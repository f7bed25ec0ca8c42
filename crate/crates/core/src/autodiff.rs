//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Operations are appended to a [`Tape`] as they run, so the tape is always
//! in topological order. [`Tape::backward`] walks it once in reverse and
//! accumulates vector-Jacobian products into every node that requires a
//! gradient.

use crate::error::{Error, Result};
use crate::tensor::{argmax, matmul_raw, Matrix, Shape};

/// Floor applied to the argument of [`Tape::ln`].
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    shape: Shape,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Sigmoid(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    SqDist(Var, Var),
    ConcatCols(Var, Var),
    SelectRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    Mask(Var, Matrix),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One tape per forward pass; it is not shared
/// between threads or training steps.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Matrix {
        match self.grads.get(v.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let s = self.shapes[v.id];
                Matrix::zeros(s.rows, s.cols)
            }
        }
    }

    pub fn contains(&self, v: Var) -> bool {
        matches!(self.grads.get(v.id), Some(Some(_)))
    }
}

fn same_shape(op: &'static str, a: Var, b: Var) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension { op, left: a.shape, right: b.shape });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        let shape = value.shape();
        self.nodes.push(Node { value, op, requires_grad });
        Var { id, shape }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never accumulates a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.id].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.id].value.as_slice()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.as_slice().iter().zip(vb.as_slice()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(a.shape.rows, a.shape.cols, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `x + bias` with a `1 x k` bias broadcast down the rows of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        if bias.shape.rows != 1 || bias.shape.cols != x.shape.cols {
            return Err(Error::Dimension { op: "add_row", left: x.shape, right: bias.shape });
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).as_slice().to_vec();
        for r in 0..value.rows() {
            for (v, bv) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(value, Op::Exp(x), rg)
    }

    /// Natural log with the argument clamped to `[LOG_EPS, inf)`. Clamped
    /// entries pass no gradient.
    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(LOG_EPS).ln());
        let rg = self.rg(x);
        self.push(value, Op::Ln(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Elementwise power. Inputs must be positive when `p` is not an integer.
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let value = self.value(x).map(|v| v.powf(p));
        let rg = self.rg(x);
        self.push(value, Op::Powf(x, p), rg)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(value, Op::Clamp(x, lo, hi), rg)
    }

    /// `n x k -> n x 1`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.iter_rows().map(|r| r.iter().sum()).collect();
        let value = Matrix::from_vec(x.shape.rows, 1, data).expect("row count");
        let rg = self.rg(x);
        self.push(value, Op::RowSum(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Mean over all entries; the mean of an empty matrix is 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = x.shape.len();
        let m = if n == 0 { 0.0 } else { self.value(x).sum() / n as f64 };
        let rg = self.rg(x);
        self.push(Matrix::scalar(m), Op::Mean(x), rg)
    }

    /// Multiplies row `i` of `x` by `v[i]`, with `v` of shape `n x 1`.
    pub fn scale_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        if v.shape != Shape::new(x.shape.rows, 1) {
            return Err(Error::Dimension { op: "scale_rows", left: x.shape, right: v.shape });
        }
        let mut value = self.value(x).clone();
        let s = self.value(v).as_slice().to_vec();
        for (r, sv) in s.iter().enumerate() {
            value.row_mut(r).iter_mut().for_each(|e| *e *= sv);
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(value, Op::ScaleRows(x, v), rg))
    }

    /// Multiplies column `j` of `x` by `v[j]`, with `v` of shape `1 x k`.
    pub fn scale_cols(&mut self, x: Var, v: Var) -> Result<Var> {
        if v.shape != Shape::new(1, x.shape.cols) {
            return Err(Error::Dimension { op: "scale_cols", left: x.shape, right: v.shape });
        }
        let mut value = self.value(x).clone();
        let s = self.value(v).as_slice().to_vec();
        for r in 0..value.rows() {
            value.row_mut(r).iter_mut().zip(&s).for_each(|(e, sv)| *e *= sv);
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(value, Op::ScaleCols(x, v), rg))
    }

    /// Squared Euclidean distances between the rows of `a` (`n x d`) and the
    /// rows of `b` (`m x d`), giving `n x m`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.shape.cols != b.shape.cols {
            return Err(Error::Dimension { op: "sq_dist", left: a.shape, right: b.shape });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut value = Matrix::zeros(a.shape.rows, b.shape.rows);
        for i in 0..va.rows() {
            for j in 0..vb.rows() {
                let d: f64 = va.row(i).iter().zip(vb.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                value.set(i, j, d);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::SqDist(a, b), rg))
    }

    /// Concatenation along the feature axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.shape.rows != b.shape.rows {
            return Err(Error::Dimension { op: "concat_cols", left: a.shape, right: b.shape });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let cols = va.cols() + vb.cols();
        let mut data = Vec::with_capacity(va.rows() * cols);
        for r in 0..va.rows() {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let value = Matrix::from_vec(va.rows(), cols, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.shape.rows) {
            return Err(Error::Contract(format!("row {bad} out of range for {}", x.shape)));
        }
        let value = self.value(x).select_rows(indices);
        let rg = self.rg(x);
        Ok(self.push(value, Op::SelectRows(x, indices.to_vec()), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Multiplies `x` elementwise by a fixed mask. Dropout masks carry the
    /// `1 / (1 - p)` rescaling in their nonzero entries.
    pub fn apply_mask(&mut self, x: Var, mask: &Matrix) -> Result<Var> {
        if mask.shape() != x.shape {
            return Err(Error::Dimension { op: "apply_mask", left: x.shape, right: mask.shape() });
        }
        let value = {
            let v = self.value(x);
            let data = v.as_slice().iter().zip(mask.as_slice()).map(|(a, m)| a * m).collect();
            Matrix::from_vec(x.shape.rows, x.shape.cols, data)?
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mask(x, mask.clone()), rg))
    }

    /// Top-`k` column indices of each row of `x`, largest first, ties broken
    /// by lowest index. Reads values only; nothing is recorded.
    pub fn top_k_indices(&self, x: Var, k: usize) -> Vec<Vec<usize>> {
        top_k_indices(self.value(x), k)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !loss.shape.is_scalar() {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {}", loss.shape)));
        }
        let n = loss.id + 1;
        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        grads[loss.id] = Some(Matrix::scalar(1.0));

        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, d: Matrix| {
            if !self.nodes[v.id].requires_grad {
                return;
            }
            match &mut grads[v.id] {
                Some(existing) => {
                    for (e, x) in existing.as_mut_slice().iter_mut().zip(d.as_slice()) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(d),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let bt = vb.transpose();
                    acc(*a, matmul_raw(g.as_slice(), g.shape(), bt.as_slice(), bt.shape()));
                }
                if self.rg(*b) {
                    let at = va.transpose();
                    acc(*b, matmul_raw(at.as_slice(), at.shape(), g.as_slice(), g.shape()));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, zip_with(g, vb, |x, y| x * y));
                acc(*b, zip_with(g, va, |x, y| x * y));
            }
            Op::AddRow(x, bias) => {
                acc(*x, g.clone());
                let mut db = Matrix::zeros(1, g.cols());
                for r in g.iter_rows() {
                    db.as_mut_slice().iter_mut().zip(r).for_each(|(d, v)| *d += v);
                }
                acc(*bias, db);
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Exp(x) => acc(*x, zip_with(g, y, |a, b| a * b)),
            Op::Ln(x) => {
                let vx = self.value(*x);
                acc(*x, zip_with(g, vx, |a, v| if v > LOG_EPS { a / v } else { 0.0 }));
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                acc(*x, zip_with(g, vx, |a, v| if v > 0.0 { a } else { 0.0 }));
            }
            Op::Sigmoid(x) => acc(*x, zip_with(g, y, |a, s| a * s * (1.0 - s))),
            Op::Powf(x, p) => {
                let vx = self.value(*x);
                acc(*x, zip_with(g, vx, |a, v| a * p * v.powf(p - 1.0)));
            }
            Op::Clamp(x, lo, hi) => {
                let vx = self.value(*x);
                acc(*x, zip_with(g, vx, |a, v| if v >= *lo && v <= *hi { a } else { 0.0 }));
            }
            Op::RowSum(x) => {
                let s = x.shape;
                let mut d = Matrix::zeros(s.rows, s.cols);
                for r in 0..s.rows {
                    let gv = g.get(r, 0);
                    d.row_mut(r).iter_mut().for_each(|e| *e = gv);
                }
                acc(*x, d);
            }
            Op::Sum(x) => {
                let s = x.shape;
                acc(*x, Matrix::filled(s.rows, s.cols, g.get(0, 0)));
            }
            Op::Mean(x) => {
                let s = x.shape;
                if !s.is_empty() {
                    acc(*x, Matrix::filled(s.rows, s.cols, g.get(0, 0) / s.len() as f64));
                }
            }
            Op::ScaleRows(x, v) => {
                let (vx, vv) = (self.value(*x), self.value(*v));
                if self.rg(*x) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let s = vv.get(r, 0);
                        d.row_mut(r).iter_mut().for_each(|e| *e *= s);
                    }
                    acc(*x, d);
                }
                if self.rg(*v) {
                    let data = (0..vx.rows())
                        .map(|r| g.row(r).iter().zip(vx.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(*v, Matrix::from_vec(vx.rows(), 1, data).expect("rows"));
                }
            }
            Op::ScaleCols(x, v) => {
                let (vx, vv) = (self.value(*x), self.value(*v));
                if self.rg(*x) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        d.row_mut(r).iter_mut().zip(vv.as_slice()).for_each(|(e, s)| *e *= s);
                    }
                    acc(*x, d);
                }
                if self.rg(*v) {
                    let mut d = Matrix::zeros(1, vx.cols());
                    for r in 0..vx.rows() {
                        for (c, dv) in d.as_mut_slice().iter_mut().enumerate() {
                            *dv += g.get(r, c) * vx.get(r, c);
                        }
                    }
                    acc(*v, d);
                }
            }
            Op::SqDist(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = Matrix::zeros(va.rows(), va.cols());
                let mut db = Matrix::zeros(vb.rows(), vb.cols());
                for i in 0..va.rows() {
                    for j in 0..vb.rows() {
                        let gij = 2.0 * g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for c in 0..va.cols() {
                            let diff = gij * (va.get(i, c) - vb.get(j, c));
                            da.row_mut(i)[c] += diff;
                            db.row_mut(j)[c] -= diff;
                        }
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::ConcatCols(a, b) => {
                let ca = a.shape.cols;
                let mut da = Matrix::zeros(a.shape.rows, ca);
                let mut db = Matrix::zeros(b.shape.rows, b.shape.cols);
                for r in 0..g.rows() {
                    let row = g.row(r);
                    da.row_mut(r).copy_from_slice(&row[..ca]);
                    db.row_mut(r).copy_from_slice(&row[ca..]);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::SelectRows(x, idx) => {
                let mut d = Matrix::zeros(x.shape.rows, x.shape.cols);
                for (r, &i) in idx.iter().enumerate() {
                    d.row_mut(i).iter_mut().zip(g.row(r)).for_each(|(e, v)| *e += v);
                }
                acc(*x, d);
            }
            Op::SoftmaxRows(x) => {
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, e) in d.row_mut(r).iter_mut().enumerate() {
                        *e = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*x, d);
            }
            Op::Mask(x, m) => acc(*x, zip_with(g, m, |a, b| a * b)),
        }
    }
}

fn zip_with(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("matching shapes")
}

/// Row-wise softmax on plain values.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Top-`k` column indices per row, largest value first, lowest index on ties.
pub fn top_k_indices(x: &Matrix, k: usize) -> Vec<Vec<usize>> {
    x.iter_rows()
        .map(|row| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            // stable sort keeps lower indices ahead of equal values
            idx.sort_by(|&i, &j| row[j].total_cmp(&row[i]));
            idx.truncate(k);
            idx
        })
        .collect()
}

/// Argmax per row of a recorded value.
pub fn argmax_rows(tape: &Tape, v: Var) -> Vec<usize> {
    tape.value(v).iter_rows().map(argmax).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::identity(2));
        let b = t.constant(m(&[&[2.0], &[3.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).as_slice(), &[2.0, 3.0]);
    }

    #[test]
    fn softmax_examples() {
        let x = m(&[&[0.0, 0.0], &[1000.0, 1000.0], &[1.0, 0.0]]);
        let s = softmax_rows(&x);
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert_eq!(s.row(1), &[0.5, 0.5]);
        let e = std::f64::consts::E;
        assert!((s.get(2, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.get(2, 0) - 0.7311).abs() < 1e-4);
        assert!((s.get(2, 1) - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.param(m(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, 9.0]]));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x), Matrix::filled(2, 3, 1.0));
    }

    #[test]
    fn dot_self_gives_two_x() {
        let mut t = Tape::new();
        let x = t.param(m(&[&[1.5], &[-2.0], &[0.25]]));
        let xt = t.transpose(x);
        let l = t.matmul(xt, x).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).as_slice(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut t = Tape::new();
        let x = t.param(Matrix::filled(1, 2, 3.0));
        let unused = t.param(Matrix::filled(2, 2, 1.0));
        let l = t.sum(x);
        let g = t.backward(l).unwrap();
        assert!(!g.contains(unused));
        assert_eq!(g.get(unused), Matrix::zeros(2, 2));
    }

    #[test]
    fn constants_never_accumulate() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::filled(1, 2, 3.0));
        let x = t.param(Matrix::filled(1, 2, 2.0));
        let p = t.mul(c, x).unwrap();
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        assert!(!g.contains(c));
        assert_eq!(g.get(x).as_slice(), &[3.0, 3.0]);
    }

    #[test]
    fn ln_clamps_at_floor() {
        let mut t = Tape::new();
        let x = t.param(m(&[&[0.0, 1.0]]));
        let l = t.ln(x);
        assert_eq!(t.value(l).get(0, 0), LOG_EPS.ln());
        let s = t.sum(l);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn top_k_ties_by_index() {
        let x = m(&[&[3.0, 2.0, 1.0, 0.0], &[0.0, 1.0, 2.0, 3.0], &[1.0, 1.0, 1.0, 1.0]]);
        let k = top_k_indices(&x, 2);
        assert_eq!(k, vec![vec![0, 1], vec![3, 2], vec![0, 1]]);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.param(Matrix::zeros(2, 3));
        let b = t.param(Matrix::zeros(3, 2));
        assert!(t.add(a, b).is_err());
        assert!(t.matmul(a, a).is_err());
        assert!(t.concat_cols(a, b).is_err());
    }
}
