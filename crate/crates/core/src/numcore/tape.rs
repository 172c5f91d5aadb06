//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so parents always precede children and a
//! single reverse sweep visits each node after all of its consumers.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numcore::matrix::gemm;
use crate::numcore::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    Relu(Var),
    SumSquares(Var),
    WeightedSum(Vec<(Var, f64)>),
    Propagate { adj: Arc<Matrix>, input: Var },
    RowAffine { input: Var, scale: Arc<Vec<f64>> },
    Precomputed { inputs: Vec<Var>, partials: Vec<Matrix> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass: one gradient per node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Every trainable leaf has an
    /// entry, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Applies `adj` (or its transpose) to every `adj.rows()`-row block of `x`.
fn block_left_mul(adj: &Matrix, transpose: bool, x: &Matrix) -> Matrix {
    let n = adj.rows();
    let f = x.cols();
    let blocks = x.rows() / n;
    let mut out = Matrix::zeros(x.rows(), f);
    let mut xb = Matrix::zeros(n, f);
    let mut ob = Matrix::zeros(n, f);
    for b in 0..blocks {
        let range = b * n * f..(b + 1) * n * f;
        xb.data_mut().copy_from_slice(&x.data()[range.clone()]);
        gemm(adj, transpose, &xb, false, &mut ob, 0.0);
        out.data_mut()[range].copy_from_slice(ob.data());
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, ng))
    }

    /// `x + 1 bᵀ`: adds the row vector `bias` (1 x c) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Shape {
                op: "add_row",
                lhs: xv.shape(),
                rhs: bv.shape(),
            });
        }
        let mut value = xv.clone();
        let c = xv.cols();
        for row in value.data_mut().chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddRow(x, bias), value, ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let ng = self.needs(x);
        self.push(Op::Scale(x, s), value, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&vals)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).relu();
        let ng = self.needs(x);
        self.push(Op::Relu(x), value, ng)
    }

    /// Sum of squared entries, as a 1x1 node.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum_squares());
        let ng = self.needs(x);
        self.push(Op::SumSquares(x), value, ng)
    }

    /// `Σ wᵢ xᵢ` over equally shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::Usage("weighted_sum of nothing".into()));
        };
        let mut value = Matrix::zeros(self.value(first).rows(), self.value(first).cols());
        for &(v, w) in terms {
            value.axpy(w, self.value(v))?;
        }
        let ng = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Op::WeightedSum(terms.to_vec()), value, ng))
    }

    /// Graph propagation `(I_B ⊗ A) X`: left-multiplies each consecutive
    /// block of `A.rows()` rows of `x` by the constant matrix `adj`.
    pub fn propagate(&mut self, adj: Arc<Matrix>, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = adj.rows();
        if adj.cols() != n || n == 0 || xv.rows() % n != 0 {
            return Err(Error::Shape {
                op: "propagate",
                lhs: adj.shape(),
                rhs: xv.shape(),
            });
        }
        let value = block_left_mul(&adj, false, xv);
        let ng = self.needs(x);
        Ok(self.push(Op::Propagate { adj, input: x }, value, ng))
    }

    /// `y[r, c] = shift[r] + scale[r] * x[r, c]` with constant per-row
    /// coefficients.
    pub fn row_affine(&mut self, x: Var, scale: Arc<Vec<f64>>, shift: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if scale.len() != xv.rows() || shift.len() != xv.rows() {
            return Err(Error::Shape {
                op: "row_affine",
                lhs: xv.shape(),
                rhs: (scale.len(), shift.len()),
            });
        }
        let c = xv.cols();
        let mut value = xv.clone();
        for (r, row) in value.data_mut().chunks_mut(c).enumerate() {
            for v in row {
                *v = shift[r] + scale[r] * *v;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Op::RowAffine { input: x, scale }, value, ng))
    }

    /// Scalar node whose value and partial derivatives were computed outside
    /// the tape. `partials[i]` must have the shape of `inputs[i]`.
    pub fn precomputed(&mut self, inputs: &[Var], value: f64, partials: Vec<Matrix>) -> Result<Var> {
        if inputs.len() != partials.len() {
            return Err(Error::Usage("one partial per input required".into()));
        }
        for (&v, p) in inputs.iter().zip(&partials) {
            if self.value(v).shape() != p.shape() {
                return Err(Error::Shape {
                    op: "precomputed",
                    lhs: self.value(v).shape(),
                    rhs: p.shape(),
                });
            }
        }
        let ng = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Op::Precomputed {
                inputs: inputs.to_vec(),
                partials,
            },
            Matrix::scalar(value),
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let mut ga = Matrix::zeros(av.rows(), av.cols());
                        gemm(&g, false, bv, true, &mut ga, 0.0);
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.needs(*b) {
                        let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                        gemm(av, true, &g, false, &mut gb, 0.0);
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g.scale(-1.0));
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.needs(*bias) {
                        let c = g.cols();
                        let mut gb = Matrix::zeros(1, c);
                        for row in g.data().chunks(c) {
                            for (s, v) in gb.data_mut().iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        accumulate(&mut grads[bias.0], gb);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], g);
                    }
                }
                Op::Scale(x, s) => {
                    accumulate(&mut grads[x.0], g.scale(*s));
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if self.needs(*p) {
                            accumulate(&mut grads[p.0], g.col_block(start, w));
                        }
                        start += w;
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gv, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SumSquares(x) => {
                    let s = 2.0 * g.data()[0];
                    accumulate(&mut grads[x.0], self.value(*x).scale(s));
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        if self.needs(v) {
                            accumulate(&mut grads[v.0], g.scale(w));
                        }
                    }
                }
                Op::Propagate { adj, input } => {
                    accumulate(&mut grads[input.0], block_left_mul(adj, true, &g));
                }
                Op::RowAffine { input, scale } => {
                    let c = g.cols();
                    let mut gx = g;
                    for (r, row) in gx.data_mut().chunks_mut(c).enumerate() {
                        for v in row {
                            *v *= scale[r];
                        }
                    }
                    accumulate(&mut grads[input.0], gx);
                }
                Op::Precomputed { inputs, partials } => {
                    let s = g.data()[0];
                    for (v, p) in inputs.iter().zip(partials) {
                        if self.needs(*v) {
                            accumulate(&mut grads[v.0], p.scale(s));
                        }
                    }
                }
            }
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            let trainable_leaf = matches!(node.op, Op::Leaf) && node.needs_grad;
            if trainable_leaf {
                if grads[idx].is_none() {
                    grads[idx] = Some(Matrix::zeros(node.value.rows(), node.value.cols()));
                }
            } else {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_of_three() {
        let mut t = Tape::new();
        let w = t.param(Matrix::scalar(3.0));
        let loss = t.sum_squares(w);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn independent_leaf_gets_zero() {
        let mut t = Tape::new();
        let w = t.param(Matrix::scalar(3.0));
        let u = t.param(Matrix::from_rows(&[[1.0, 2.0]]));
        let loss = t.sum_squares(w);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(u).unwrap(), &Matrix::zeros(1, 2));
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let mut t = Tape::new();
        let w = t.param(Matrix::zeros(2, 1));
        assert!(matches!(t.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::scalar(2.0));
        let w = t.param(Matrix::scalar(5.0));
        let p = t.matmul(c, w).unwrap();
        let loss = t.sum_squares(p);
        let g = t.backward(loss).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(w).unwrap().data(), &[40.0]);
    }

    #[test]
    fn propagate_applies_per_block() {
        let adj = Arc::new(Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]));
        let mut t = Tape::new();
        let x = t.param(Matrix::from_rows(&[[1.0], [2.0], [3.0], [4.0]]));
        let y = t.propagate(adj, x).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn relu_kink_has_zero_derivative() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_rows(&[[0.0, 1.0, -1.0]]));
        let r = t.relu(x);
        let loss = t.sum_squares(r);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 2.0, 0.0]);
    }
}
