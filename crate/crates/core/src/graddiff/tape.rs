//! Define-by-run reverse-mode differentiation over matrix-valued nodes.
//!
//! Every node holds a `rows x cols` value; batches are rows. The tape is
//! rebuilt for every loss evaluation.

use super::params::{Gradients, ParamStore};
use crate::error::{Result, TcmError};
use crate::numerics::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(String),
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TcmError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        Ok(self.push(Op::Param(name.to_string()), value))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(Op::MatMulT(a, b), value))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let r = self.value(row);
        if r.rows() != 1 {
            return Err(TcmError::shape(
                "add_row",
                format!("bias must be a row, got {:?}", r.shape()),
            ));
        }
        let value = self.value(a).add_row(r.data())?;
        Ok(self.push(Op::AddRow(a, row), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Matrix::from_vec(x.rows(), x.cols(), data)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(Op::Offset(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(Op::LeakyRelu(a, slope), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), value)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), value)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), value)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        self.push(Op::Square(a), value)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Matrix::row_vector(&[s]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let s = m.data().iter().sum::<f64>() / m.data().len().max(1) as f64;
        self.push(Op::Mean(a), Matrix::row_vector(&[s]))
    }

    /// Per-row sums, giving a `rows x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let sums: Vec<f64> = (0..m.rows()).map(|i| m.row(i).iter().sum()).collect();
        self.push(Op::RowSum(a), Matrix::column(&sums))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        for i in 0..m.rows() {
            let row = m.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.row_mut(i)
                .iter_mut()
                .zip(row)
                .for_each(|(o, v)| *o = v - lse);
        }
        self.push(Op::LogSoftmax(a), out)
    }

    /// Picks column `idx[i]` from row `i`, giving a `rows x 1` column.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let m = self.value(a);
        if idx.len() != m.rows() || idx.iter().any(|&j| j >= m.cols()) {
            return Err(TcmError::shape(
                "gather",
                format!("{} indices into {:?}", idx.len(), m.shape()),
            ));
        }
        let picked: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| m.get(i, j)).collect();
        Ok(self.push(Op::Gather(a, idx.to_vec()), Matrix::column(&picked)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let m = self.value(a);
        if start > end || end > m.cols() {
            return Err(TcmError::shape(
                "slice_cols",
                format!("{start}..{end} of {} columns", m.cols()),
            ));
        }
        let value = Matrix::from_fn(m.rows(), end - start, |i, j| m.get(i, start + j));
        Ok(self.push(Op::SliceCols(a, start, end), value))
    }

    /// Reverse sweep from a scalar node; returns gradients for every
    /// parameter slot touched by the recorded computation.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(TcmError::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::row_vector(&[1.0]));
        let mut grads = Gradients::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => grads.accumulate(name, g),
                Op::MatMulT(a, b) => {
                    // y = a b^T: da = g b, db = g^T a
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.transpose().matmul(self.value(*a))?;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g
                        .col_means()
                        .iter()
                        .map(|m| m * g.rows() as f64)
                        .collect::<Vec<_>>();
                    acc(&mut adj, *row, Matrix::row_vector(&gr));
                    acc(&mut adj, *a, g);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, g.scale(-1.0));
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip(&g, self.value(*b), |x, y| x * y);
                    let gb = zip(&g, self.value(*a), |x, y| x * y);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut adj, *a, g.scale(*s)),
                Op::Offset(a) => acc(&mut adj, *a, g),
                Op::Tanh(a) => acc(&mut adj, *a, zip(&g, &node.value, |x, y| x * (1.0 - y * y))),
                Op::Relu(a) => acc(
                    &mut adj,
                    *a,
                    zip(&g, self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 }),
                ),
                Op::LeakyRelu(a, s) => acc(
                    &mut adj,
                    *a,
                    zip(&g, self.value(*a), |x, v| if v > 0.0 { x } else { s * x }),
                ),
                Op::Sigmoid(a) => acc(&mut adj, *a, zip(&g, &node.value, |x, y| x * y * (1.0 - y))),
                Op::Exp(a) => acc(&mut adj, *a, zip(&g, &node.value, |x, y| x * y)),
                Op::Ln(a) => acc(&mut adj, *a, zip(&g, self.value(*a), |x, v| x / v)),
                Op::Abs(a) => acc(&mut adj, *a, zip(&g, self.value(*a), |x, v| x * sign(v))),
                Op::Square(a) => acc(&mut adj, *a, zip(&g, self.value(*a), |x, v| 2.0 * x * v)),
                Op::Clamp(a, lo, hi) => acc(
                    &mut adj,
                    *a,
                    zip(
                        &g,
                        self.value(*a),
                        |x, v| if v < *lo || v > *hi { 0.0 } else { x },
                    ),
                ),
                Op::Sum(a) => {
                    let s = g.data()[0];
                    let src = self.value(*a);
                    acc(
                        &mut adj,
                        *a,
                        Matrix::from_fn(src.rows(), src.cols(), |_, _| s),
                    );
                }
                Op::Mean(a) => {
                    let src = self.value(*a);
                    let s = g.data()[0] / src.data().len().max(1) as f64;
                    acc(
                        &mut adj,
                        *a,
                        Matrix::from_fn(src.rows(), src.cols(), |_, _| s),
                    );
                }
                Op::RowSum(a) => {
                    let src = self.value(*a);
                    acc(
                        &mut adj,
                        *a,
                        Matrix::from_fn(src.rows(), src.cols(), |i, _| g.get(i, 0)),
                    );
                }
                Op::LogSoftmax(a) => {
                    // dx = g - softmax * rowsum(g)
                    let y = &node.value;
                    let ga = Matrix::from_fn(y.rows(), y.cols(), |i, j| {
                        let gs: f64 = g.row(i).iter().sum();
                        g.get(i, j) - y.get(i, j).exp() * gs
                    });
                    acc(&mut adj, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for (i, &j) in idx.iter().enumerate() {
                        ga.set(i, j, g.get(i, 0));
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::SliceCols(a, start, end) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..src.rows() {
                        for j in *start..*end {
                            ga.set(i, j, g.get(i, j - start));
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
            }
        }
        Ok(grads)
    }
}

fn acc(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("zip of equal shapes")
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
