//! Reverse-mode automatic differentiation over [`Tensor2`] values.
//!
//! A [`Graph`] records every operation as it is evaluated (define-by-run).
//! Shapes are checked when an op is recorded, so a mis-shaped model fails on
//! its first forward pass rather than during backpropagation.

use std::collections::HashMap;

use super::linalg::Factorization;
use super::matrix::{canonical_sum, Tensor2};
use super::params::{ParamId, ParamStore};
use crate::error::DiffError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    NodeMix(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    AddRow(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Abs(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Solve { m: Var, b: Var, lu: Box<Factorization> },
    RowNormalize(Var),
    ScalarWithGrad(Var, Box<Tensor2>),
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(u64, ParamId, Var)>,
    bound: HashMap<(u64, ParamId), Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "scalar() on a {:?} node", t.shape());
        t.data()[0]
    }

    fn push(&mut self, value: Tensor2, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that gradients are not propagated into.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input not owned by a [`ParamStore`].
    pub fn input(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a store slot into the graph. Repeated binds of the same slot
    /// return the same node, so gradient contributions accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.input(store.value(id).clone());
        self.bound.insert(key, v);
        self.bindings.push((store.uid(), id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a * b` with the contraction summed in canonical order; see
    /// [`Tensor2::matmul_canonical`].
    pub fn node_mix(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_canonical(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::NodeMix(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).hadamard(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Adds the scalar `s` to every entry.
    pub fn shift(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(value, Op::Shift(a), ng)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.shift(neg, 1.0)
    }

    /// Adds a `1 x cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, c), "add_row: bias {:?} for a {r}x{c} matrix", self.value(row).shape());
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, b) in value.row_mut(i).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(value, Op::Abs(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).concat_cols(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::ConcatCols(a, b), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_cols(start, end);
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshaped(rows, cols);
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor2::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor2::scalar(t.sum() / t.data().len() as f64);
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng)
    }

    /// `X` with `M X = B`. Gradients flow into both `M` and `B`.
    pub fn solve(&mut self, m: Var, b: Var) -> Result<Var, DiffError> {
        let lu = Factorization::new(self.value(m))?;
        let value = lu.solve(self.value(b));
        let ng = self.ng(m) || self.ng(b);
        Ok(self.push(value, Op::Solve { m, b, lu: Box::new(lu) }, ng))
    }

    /// Divides every row by its sum; an all-zero row maps to a zero row.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let value = row_normalize(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::RowNormalize(a), ng)
    }

    /// Records a scalar function of `a` whose value and gradient were
    /// computed outside the tape.
    pub fn scalar_with_grad(&mut self, a: Var, value: f64, grad: Tensor2) -> Var {
        assert_eq!(self.value(a).shape(), grad.shape(), "scalar_with_grad: gradient shape");
        let ng = self.ng(a);
        self.push(Tensor2::scalar(value), Op::ScalarWithGrad(a, Box::new(grad)), ng)
    }

    /// Backpropagates from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let acc = |v: Var, delta: Tensor2, grads: &mut Vec<Option<Tensor2>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) | Op::NodeMix(a, b) => {
                    if self.ng(*a) {
                        acc(*a, g.matmul(&self.value(*b).transpose()), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, self.value(*a).transpose().matmul(&g), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g.scale(-1.0), &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, g.hadamard(self.value(*b)), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, g.hadamard(self.value(*a)), &mut grads);
                    }
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s), &mut grads),
                Op::Shift(a) | Op::Reshape(a) => {
                    let shape = self.value(*a).shape();
                    acc(*a, g.reshaped(shape.0, shape.1), &mut grads);
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let mut colsum = Tensor2::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for (s, x) in colsum.data_mut().iter_mut().zip(g.row(i)) {
                                *s += x;
                            }
                        }
                        acc(*row, colsum, &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Transpose(a) => acc(*a, g.transpose(), &mut grads),
                Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |g, y| g * (1.0 - y * y)), &mut grads),
                Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |g, y| g * y * (1.0 - y)), &mut grads),
                Op::Relu(a) => acc(*a, g.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }), &mut grads),
                Op::Exp(a) => acc(*a, g.hadamard(&node.value), &mut grads),
                Op::Abs(a) => acc(*a, g.zip_map(self.value(*a), |g, x| g * sign(x)), &mut grads),
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    acc(*a, g.slice_cols(0, ca), &mut grads);
                    acc(*b, g.slice_cols(ca, g.cols()), &mut grads);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let mut full = Tensor2::zeros(r, c);
                    for i in 0..r {
                        full.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(*a, full, &mut grads);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(*a, Tensor2::filled(r, c, g.data()[0]), &mut grads);
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(*a, Tensor2::filled(r, c, g.data()[0] / (r * c) as f64), &mut grads);
                }
                Op::Solve { m, b, lu } => {
                    let gb = lu.solve_transpose(&g);
                    if self.ng(*m) {
                        acc(*m, gb.matmul(&node.value.transpose()).scale(-1.0), &mut grads);
                    }
                    acc(*b, gb, &mut grads);
                }
                Op::RowNormalize(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut ga = Tensor2::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let s = row_total(x.row(i));
                        if s == 0.0 {
                            continue;
                        }
                        let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(g, y)| g * y).sum();
                        for (o, gij) in ga.row_mut(i).iter_mut().zip(g.row(i)) {
                            *o = (gij - dot) / s;
                        }
                    }
                    acc(*a, ga, &mut grads);
                }
                Op::ScalarWithGrad(a, grad) => acc(*a, grad.scale(g.data()[0]), &mut grads),
            }
        }
        Gradients { grads }
    }

    /// Gradients of every slot of `store` bound into this graph, in bind order.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<(ParamId, Tensor2)> {
        self.bindings
            .iter()
            .filter(|(uid, _, _)| *uid == store.uid())
            .filter_map(|&(_, id, v)| grads.wrt(v).map(|g| (id, g.clone())))
            .collect()
    }
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    /// Gradient with respect to a leaf; `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor2> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn row_total(row: &[f64]) -> f64 {
    let mut terms: Vec<f64> = row.iter().copied().filter(|&x| x != 0.0).collect();
    canonical_sum(&mut terms)
}

/// Row-stochastic normalization with the zero-row convention.
pub fn row_normalize(a: &Tensor2) -> Tensor2 {
    let mut out = a.clone();
    for i in 0..a.rows() {
        let s = row_total(a.row(i));
        if s == 0.0 {
            out.row_mut(i).fill(0.0);
        } else {
            for x in out.row_mut(i) {
                *x /= s;
            }
        }
    }
    out
}
