//! Tape-based reverse-mode differentiation over the closed set of matrix
//! operations the model uses.
//!
//! Every value is a dense row-major matrix (scalars are 1×1). Operations are
//! appended to the [`Tape`] in execution order; [`Tape::backward`] walks the
//! tape in exact reverse and accumulates gradients into every node that
//! depends on a leaf created with `requires_grad = true`. Leaves created with
//! `requires_grad = false` (frozen parameters, inputs) never receive a
//! gradient.

use std::borrow::Cow;

use ndarray::{Array2, Axis};
use rand::Rng;
use thiserror::Error;

use crate::graph::{GraphError, NormAdjacency};
use crate::linalg;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("{op}: shape {lhs:?} is incompatible with {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a 1x1 loss, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("dropout probability {0} is outside [0, 1)")]
    DropoutProbability(f64),
    #[error("mask selects no rows")]
    EmptyMask,
    #[error("label {label} of row {row} is outside 0..{n_classes}")]
    BadLabel {
        row: usize,
        label: usize,
        n_classes: usize,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op<'g> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    /// Per-entry scale factors: 0 for dropped entries, 1/(1-p) for kept ones.
    Dropout(Var, Array2<f64>),
    Spmm(&'g NormAdjacency, Var),
    GinAggregate(&'g NormAdjacency, Var, Var),
    LogSoftmax(Var),
    MaskedCe {
        input: Var,
        rows: Vec<usize>,
        labels: Vec<usize>,
    },
    SumAll(Var),
    Add(Var, Var),
}

struct Node<'g> {
    value: Cow<'g, Array2<f64>>,
    grad: Option<Array2<f64>>,
    requires_grad: bool,
    op: Op<'g>,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape<'g> {
    nodes: Vec<Node<'g>>,
}

fn check_finite(op: &'static str, value: &Array2<f64>) -> Result<(), AdError> {
    if value.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AdError::NonFinite { op })
    }
}

impl<'g> Tape<'g> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'g, Array2<f64>>, requires_grad: bool, op: Op<'g>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf that owns its value.
    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), requires_grad, Op::Leaf)
    }

    /// Records a leaf borrowing a value that outlives the tape.
    pub fn leaf_ref(&mut self, value: &'g Array2<f64>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was
    /// tracked.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Array2<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(AdError::Shape {
                op: "matmul",
                lhs: av.dim(),
                rhs: bv.dim(),
            });
        }
        let out = linalg::matmul(av, bv);
        check_finite("matmul", &out)?;
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(Cow::Owned(out), rg, Op::MatMul(a, b)))
    }

    /// `x + bias` with a 1×k bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AdError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.nrows() != 1 || bv.ncols() != xv.ncols() {
            return Err(AdError::Shape {
                op: "add_bias",
                lhs: xv.dim(),
                rhs: bv.dim(),
            });
        }
        let out = xv + bv;
        check_finite("add_bias", &out)?;
        let rg = self.tracked(x) || self.tracked(bias);
        Ok(self.push(Cow::Owned(out), rg, Op::AddBias(x, bias)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AdError> {
        let out = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.tracked(x);
        Ok(self.push(Cow::Owned(out), rg, Op::Relu(x)))
    }

    /// Inverted dropout. In eval mode, or with `p == 0`, this is the identity
    /// and draws nothing from `rng`. In training mode one uniform draw is
    /// consumed per entry in row-major order; an entry is kept when its draw
    /// is `>= p`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, AdError> {
        if !(0.0..1.0).contains(&p) {
            return Err(AdError::DropoutProbability(p));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask = Array2::from_shape_simple_fn(xv.raw_dim(), || {
            if rng.gen::<f64>() >= p {
                scale
            } else {
                0.0
            }
        });
        let out = xv * &mask;
        let rg = self.tracked(x);
        Ok(self.push(Cow::Owned(out), rg, Op::Dropout(x, mask)))
    }

    pub fn spmm(&mut self, adj: &'g NormAdjacency, x: Var) -> Result<Var, AdError> {
        let out = adj.spmm(self.value(x))?;
        check_finite("spmm", &out)?;
        let rg = self.tracked(x);
        Ok(self.push(Cow::Owned(out), rg, Op::Spmm(adj, x)))
    }

    /// `(1 + ε)·h + A·h` with a learnable 1×1 `ε`.
    pub fn gin_aggregate(
        &mut self,
        adj: &'g NormAdjacency,
        h: Var,
        eps: Var,
    ) -> Result<Var, AdError> {
        let ev = self.value(eps);
        if ev.dim() != (1, 1) {
            return Err(AdError::Shape {
                op: "gin_aggregate",
                lhs: self.value(h).dim(),
                rhs: ev.dim(),
            });
        }
        let scale = 1.0 + ev[[0, 0]];
        let hv = self.value(h);
        let mut out = adj.spmm(hv)?;
        out.zip_mut_with(hv, |o, &x| *o += scale * x);
        check_finite("gin_aggregate", &out)?;
        let rg = self.tracked(h) || self.tracked(eps);
        Ok(self.push(Cow::Owned(out), rg, Op::GinAggregate(adj, h, eps)))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, AdError> {
        let out = linalg::log_softmax_rows(self.value(x));
        check_finite("log_softmax_rows", &out)?;
        let rg = self.tracked(x);
        Ok(self.push(Cow::Owned(out), rg, Op::LogSoftmax(x)))
    }

    /// Mean negative log-probability of the true class over masked rows.
    pub fn masked_ce_mean(
        &mut self,
        logprobs: Var,
        labels: &[usize],
        mask: &[bool],
    ) -> Result<Var, AdError> {
        let lp = self.value(logprobs);
        if labels.len() != lp.nrows() || mask.len() != lp.nrows() {
            return Err(AdError::Shape {
                op: "masked_ce_mean",
                lhs: lp.dim(),
                rhs: (labels.len(), mask.len()),
            });
        }
        let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(AdError::EmptyMask);
        }
        let mut picked = Vec::with_capacity(rows.len());
        for &row in &rows {
            let label = labels[row];
            if label >= lp.ncols() {
                return Err(AdError::BadLabel {
                    row,
                    label,
                    n_classes: lp.ncols(),
                });
            }
            picked.push(label);
        }
        let total: f64 = rows.iter().zip(&picked).map(|(&r, &c)| -lp[[r, c]]).sum();
        let out = Array2::from_elem((1, 1), total / rows.len() as f64);
        check_finite("masked_ce_mean", &out)?;
        let rg = self.tracked(logprobs);
        Ok(self.push(
            Cow::Owned(out),
            rg,
            Op::MaskedCe {
                input: logprobs,
                rows,
                labels: picked,
            },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, AdError> {
        let out = Array2::from_elem((1, 1), self.value(x).sum());
        check_finite("sum_all", &out)?;
        let rg = self.tracked(x);
        Ok(self.push(Cow::Owned(out), rg, Op::SumAll(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(AdError::Shape {
                op: "add",
                lhs: av.dim(),
                rhs: bv.dim(),
            });
        }
        let out = av + bv;
        check_finite("add", &out)?;
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(Cow::Owned(out), rg, Op::Add(a, b)))
    }

    fn accumulate(&mut self, target: Var, contribution: Array2<f64>) {
        let node = &mut self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => *g += &contribution,
            None => node.grad = Some(contribution),
        }
    }

    /// Reverse pass from a scalar loss. Gradients from earlier calls are
    /// discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<(), AdError> {
        let (rows, cols) = self.value(loss).dim();
        if (rows, cols) != (1, 1) {
            return Err(AdError::NotScalar { rows, cols });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.tracked(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions: Vec<(Var, Array2<f64>)> = {
                let node = &self.nodes[idx];
                let t = |v: Var| self.nodes[v.0].requires_grad;
                match &node.op {
                    Op::Leaf => Vec::new(),
                    Op::MatMul(a, b) => {
                        let mut c = Vec::new();
                        if t(*a) {
                            c.push((*a, linalg::matmul_nt(&g, self.value(*b))));
                        }
                        if t(*b) {
                            c.push((*b, linalg::matmul_tn(self.value(*a), &g)));
                        }
                        c
                    }
                    Op::AddBias(x, bias) => {
                        let mut c = Vec::new();
                        if t(*bias) {
                            c.push((*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0))));
                        }
                        if t(*x) {
                            c.push((*x, g.clone()));
                        }
                        c
                    }
                    Op::Relu(x) => {
                        let mut dx = g.clone();
                        dx.zip_mut_with(self.value(*x), |d, &v| {
                            if v <= 0.0 {
                                *d = 0.0;
                            }
                        });
                        vec![(*x, dx)]
                    }
                    Op::Dropout(x, mask) => vec![(*x, &g * mask)],
                    // Both operator kinds are symmetric, so Aᵀg = A·g.
                    Op::Spmm(adj, x) => vec![(*x, adj.spmm(&g)?)],
                    Op::GinAggregate(adj, h, eps) => {
                        let mut c = Vec::new();
                        if t(*eps) {
                            let d: f64 = g.iter().zip(self.value(*h)).map(|(a, b)| a * b).sum();
                            c.push((*eps, Array2::from_elem((1, 1), d)));
                        }
                        if t(*h) {
                            let scale = 1.0 + self.value(*eps)[[0, 0]];
                            let mut dh = adj.spmm(&g)?;
                            dh.zip_mut_with(&g, |o, &x| *o += scale * x);
                            c.push((*h, dh));
                        }
                        c
                    }
                    Op::LogSoftmax(x) => {
                        let out = &node.value;
                        let mut dx = g.clone();
                        for (mut drow, orow) in dx.rows_mut().into_iter().zip(out.rows()) {
                            let gsum: f64 = drow.sum();
                            drow.zip_mut_with(&orow, |d, &o| *d -= o.exp() * gsum);
                        }
                        vec![(*x, dx)]
                    }
                    Op::MaskedCe {
                        input,
                        rows,
                        labels,
                    } => {
                        let mut dx = Array2::zeros(self.value(*input).raw_dim());
                        let w = -g[[0, 0]] / rows.len() as f64;
                        for (&r, &c) in rows.iter().zip(labels) {
                            dx[[r, c]] += w;
                        }
                        vec![(*input, dx)]
                    }
                    Op::SumAll(x) => {
                        vec![(*x, Array2::from_elem(self.value(*x).raw_dim(), g[[0, 0]]))]
                    }
                    Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
                }
            };
            self.nodes[idx].grad = Some(g);
            for (target, contribution) in contributions {
                self.accumulate(target, contribution);
            }
        }
        Ok(())
    }
}
