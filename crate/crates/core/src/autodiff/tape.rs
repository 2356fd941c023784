//! Recorded expression graph over `f64` vectors with reverse accumulation.
//!
//! Every operation is evaluated eagerly when it is recorded, so building an
//! expression also computes its value. The recorded graph can then be
//! re-evaluated after changing leaf values with [`Tape::set_leaf`] and
//! [`Tape::evaluate`], which is how the iterative inference loops reuse one
//! graph across optimizer steps. Nodes that depend only on constants are
//! never recomputed.
//!
//! Values are dense vectors. Scalars are vectors of length one. There is no
//! broadcasting: elementwise operations require equal lengths, and shape
//! mistakes panic since they are programming errors.

use std::borrow::Cow;

use crate::special::{softplus, sigmoid, ReluPartials};

use super::AutodiffError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize, f64),
    Square(usize),
    Sqrt(usize),
    Log(usize),
    Exp(usize),
    Softplus(usize),
    Sum(usize),
    Dot(usize, usize),
    /// Row-major `rows x cols` matrix times a vector.
    MatVec {
        w: usize,
        x: usize,
        rows: usize,
        cols: usize,
    },
    Concat(Vec<usize>),
    Index(usize, usize),
    ReluMean(usize, usize),
    ReluVar(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Softplus(_) => "softplus",
            Op::Sum(_) => "sum",
            Op::Dot(..) => "dot",
            Op::MatVec { .. } => "matvec",
            Op::Concat(_) => "concat",
            Op::Index(..) => "index",
            Op::ReluMean(..) => "relu-mean",
            Op::ReluVar(..) => "relu-var",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
    requires_grad: bool,
    /// Depends on no leaf, so its value never changes.
    is_static: bool,
}

/// A recorded computation.
///
/// Leaves are the differentiable inputs (model parameters and/or inference
/// targets); constants take no part in differentiation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<usize>,
    stale: bool,
    fault: Option<AutodiffError>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Vec<f64>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Adjoint of `var`; zero when `var` does not influence the root.
    pub fn wrt(&self, var: Var) -> Cow<'_, [f64]> {
        let a = &self.adjoints[var.0];
        if a.is_empty() {
            Cow::Owned(vec![0.0; self.lens[var.0]])
        } else {
            Cow::Borrowed(a)
        }
    }

    /// Adds the adjoint of `var` into `out`.
    pub fn accumulate_into(&self, var: Var, out: &mut [f64]) {
        let a = &self.adjoints[var.0];
        if !a.is_empty() {
            assert_eq!(a.len(), out.len());
            for (o, g) in out.iter_mut().zip(a) {
                *o += g;
            }
        }
    }
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

    pub fn leaves(&self) -> impl Iterator<Item = Var> + '_ {
        self.leaves.iter().map(|&i| Var(i))
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        let id = self.nodes.len();
        self.leaves.push(id);
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
            is_static: false,
        });
        Var(id)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(vec![value])
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            requires_grad: false,
            is_static: true,
        });
        Var(id)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(vec![value])
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].value
    }

    /// First component of a node's value.
    pub fn scalar_value(&self, var: Var) -> f64 {
        self.nodes[var.0].value[0]
    }

    /// First domain violation seen while recording or evaluating, if any.
    pub fn fault(&self) -> Option<&AutodiffError> {
        self.fault.as_ref()
    }

    /// Replaces a leaf's value. The tape must be re-evaluated before the
    /// next [`Tape::backward`].
    pub fn set_leaf(&mut self, var: Var, value: &[f64]) -> Result<(), AutodiffError> {
        let node = &mut self.nodes[var.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(AutodiffError::NotALeaf(var.0));
        }
        if node.value.len() != value.len() {
            return Err(AutodiffError::LeafShape {
                node: var.0,
                expected: node.value.len(),
                got: value.len(),
            });
        }
        node.value.copy_from_slice(value);
        self.stale = true;
        Ok(())
    }

    /// Recomputes every node that depends on a leaf.
    pub fn evaluate(&mut self) -> Result<(), AutodiffError> {
        self.fault = None;
        for i in 0..self.nodes.len() {
            if self.nodes[i].is_static || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (done, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if compute(&node.op, done, &mut node.value).is_err() && self.fault.is_none() {
                self.fault = Some(AutodiffError::Domain {
                    node: i,
                    op: node.op.name(),
                });
            }
        }
        self.stale = false;
        match &self.fault {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op) -> Var {
        let inputs = op_inputs(&op);
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let is_static = inputs.iter().all(|&i| self.nodes[i].is_static);
        let mut value = Vec::new();
        let id = self.nodes.len();
        if compute(&op, &self.nodes, &mut value).is_err() && self.fault.is_none() {
            self.fault = Some(AutodiffError::Domain {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            is_static,
        });
        Var(id)
    }

    fn same_len(&self, a: Var, b: Var, what: &str) {
        let (la, lb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        assert_eq!(la, lb, "{what}: operand lengths differ ({la} vs {lb})");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "add");
        self.push(Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "sub");
        self.push(Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "mul");
        self.push(Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "div");
        self.push(Op::Div(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg(a.0))
    }

    /// `c * a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(a.0, c))
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Offset(a.0, c))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.push(Op::Square(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.push(Op::Sqrt(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.push(Op::Log(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.push(Op::Softplus(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a.0))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "dot");
        self.push(Op::Dot(a.0, b.0))
    }

    /// `w · x` where `w` holds a row-major `rows x cols` matrix.
    pub fn matvec(&mut self, w: Var, x: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.nodes[w.0].value.len(), rows * cols, "matvec: matrix size");
        assert_eq!(self.nodes[x.0].value.len(), cols, "matvec: vector size");
        self.push(Op::MatVec {
            w: w.0,
            x: x.0,
            rows,
            cols,
        })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        self.push(Op::Concat(parts.iter().map(|v| v.0).collect()))
    }

    /// Component `i` of `a` as a scalar node.
    pub fn index(&mut self, a: Var, i: usize) -> Var {
        assert!(i < self.nodes[a.0].value.len(), "index out of range");
        self.push(Op::Index(a.0, i))
    }

    /// `E[max(0, z)]` componentwise for `z ~ N(mean, var)`.
    pub fn relu_mean(&mut self, mean: Var, var: Var) -> Var {
        self.same_len(mean, var, "relu-mean");
        self.push(Op::ReluMean(mean.0, var.0))
    }

    /// `Var[max(0, z)]` componentwise for `z ~ N(mean, var)`.
    pub fn relu_var(&mut self, mean: Var, var: Var) -> Var {
        self.same_len(mean, var, "relu-var");
        self.push(Op::ReluVar(mean.0, var.0))
    }

    /// Sums a non-empty list of equally shaped nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    /// Reverse accumulation from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, AutodiffError> {
        if self.stale {
            return Err(AutodiffError::NotEvaluated);
        }
        if let Some(e) = &self.fault {
            return Err(e.clone());
        }
        let len = self.nodes[root.0].value.len();
        if len != 1 {
            return Err(AutodiffError::NonScalarRoot { node: root.0, len });
        }
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        adj[root.0] = vec![1.0];
        for i in (0..=root.0).rev() {
            if adj[i].is_empty() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            self.pull(i, &g, &mut adj);
            adj[i] = g;
        }
        // Only nodes that require gradients carry meaningful adjoints.
        for (a, n) in adj.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                a.clear();
            }
        }
        Ok(Gradients {
            adjoints: adj,
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
        })
    }

    fn pull(&self, i: usize, g: &[f64], adj: &mut [Vec<f64>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        let val = |j: usize| nodes[j].value.as_slice();
        let out = nodes[i].value.as_slice();
        match &nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc(adj, nodes, *a, |k| g[k]);
                acc(adj, nodes, *b, |k| g[k]);
            }
            Op::Sub(a, b) => {
                acc(adj, nodes, *a, |k| g[k]);
                acc(adj, nodes, *b, |k| -g[k]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(adj, nodes, *a, |k| g[k] * vb[k]);
                acc(adj, nodes, *b, |k| g[k] * va[k]);
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                acc(adj, nodes, *a, |k| g[k] / vb[k]);
                acc(adj, nodes, *b, |k| -g[k] * out[k] / vb[k]);
            }
            Op::Neg(a) => acc(adj, nodes, *a, |k| -g[k]),
            Op::Scale(a, c) => acc(adj, nodes, *a, |k| g[k] * c),
            Op::Offset(a, _) => acc(adj, nodes, *a, |k| g[k]),
            Op::Square(a) => {
                let va = val(*a);
                acc(adj, nodes, *a, |k| 2.0 * va[k] * g[k]);
            }
            Op::Sqrt(a) => acc(adj, nodes, *a, |k| g[k] * 0.5 / out[k]),
            Op::Log(a) => {
                let va = val(*a);
                acc(adj, nodes, *a, |k| g[k] / va[k]);
            }
            Op::Exp(a) => acc(adj, nodes, *a, |k| g[k] * out[k]),
            Op::Softplus(a) => {
                let va = val(*a);
                acc(adj, nodes, *a, |k| g[k] * sigmoid(va[k]));
            }
            Op::Sum(a) => acc(adj, nodes, *a, |_| g[0]),
            Op::Dot(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(adj, nodes, *a, |k| g[0] * vb[k]);
                acc(adj, nodes, *b, |k| g[0] * va[k]);
            }
            Op::MatVec { w, x, rows, cols } => {
                let (vw, vx) = (val(*w), val(*x));
                if wants(*w) {
                    let dw = slot(adj, *w, rows * cols);
                    for r in 0..*rows {
                        let gr = g[r];
                        if gr != 0.0 {
                            let row = &mut dw[r * cols..(r + 1) * cols];
                            for (d, xv) in row.iter_mut().zip(vx) {
                                *d += gr * xv;
                            }
                        }
                    }
                }
                if wants(*x) {
                    let dx = slot(adj, *x, *cols);
                    for r in 0..*rows {
                        let gr = g[r];
                        if gr != 0.0 {
                            let row = &vw[r * cols..(r + 1) * cols];
                            for (d, wv) in dx.iter_mut().zip(row) {
                                *d += gr * wv;
                            }
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p].value.len();
                    acc(adj, nodes, p, |k| g[off + k]);
                    off += n;
                }
            }
            Op::Index(a, idx) => {
                if wants(*a) {
                    let n = nodes[*a].value.len();
                    slot(adj, *a, n)[*idx] += g[0];
                }
            }
            Op::ReluMean(m, v) => {
                let (vm, vv) = (val(*m), val(*v));
                let parts: Vec<ReluPartials> =
                    vm.iter().zip(vv).map(|(&a, &b)| ReluPartials::at(a, b)).collect();
                acc(adj, nodes, *m, |k| g[k] * parts[k].dmean_dm);
                acc(adj, nodes, *v, |k| g[k] * parts[k].dmean_dv);
            }
            Op::ReluVar(m, v) => {
                let (vm, vv) = (val(*m), val(*v));
                let parts: Vec<ReluPartials> =
                    vm.iter().zip(vv).map(|(&a, &b)| ReluPartials::at(a, b)).collect();
                acc(adj, nodes, *m, |k| g[k] * parts[k].dvar_dm);
                acc(adj, nodes, *v, |k| g[k] * parts[k].dvar_dv);
            }
        }
    }
}

fn slot(adj: &mut [Vec<f64>], j: usize, len: usize) -> &mut [f64] {
    if adj[j].is_empty() {
        adj[j] = vec![0.0; len];
    }
    &mut adj[j]
}

fn acc(adj: &mut [Vec<f64>], nodes: &[Node], j: usize, f: impl Fn(usize) -> f64) {
    if !nodes[j].requires_grad {
        return;
    }
    let d = slot(adj, j, nodes[j].value.len());
    for (k, x) in d.iter_mut().enumerate() {
        *x += f(k);
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::Dot(a, b)
        | Op::ReluMean(a, b)
        | Op::ReluVar(a, b) => vec![*a, *b],
        Op::MatVec { w, x, .. } => vec![*w, *x],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::Offset(a, _)
        | Op::Square(a)
        | Op::Sqrt(a)
        | Op::Log(a)
        | Op::Exp(a)
        | Op::Softplus(a)
        | Op::Sum(a)
        | Op::Index(a, _) => vec![*a],
        Op::Concat(parts) => parts.clone(),
    }
}

/// Evaluates `op` from already computed `nodes` into `out`. Returns `Err`
/// on a domain violation; `out` then holds NaN where it occurred.
fn compute(op: &Op, nodes: &[Node], out: &mut Vec<f64>) -> Result<(), ()> {
    let v = |j: usize| nodes[j].value.as_slice();
    let mut ok = true;
    out.clear();
    match op {
        Op::Leaf | Op::Constant => unreachable!("leaves and constants hold their own values"),
        Op::Add(a, b) => out.extend(v(*a).iter().zip(v(*b)).map(|(x, y)| x + y)),
        Op::Sub(a, b) => out.extend(v(*a).iter().zip(v(*b)).map(|(x, y)| x - y)),
        Op::Mul(a, b) => out.extend(v(*a).iter().zip(v(*b)).map(|(x, y)| x * y)),
        Op::Div(a, b) => out.extend(v(*a).iter().zip(v(*b)).map(|(x, y)| {
            if *y == 0.0 {
                ok = false;
                f64::NAN
            } else {
                x / y
            }
        })),
        Op::Neg(a) => out.extend(v(*a).iter().map(|x| -x)),
        Op::Scale(a, c) => out.extend(v(*a).iter().map(|x| c * x)),
        Op::Offset(a, c) => out.extend(v(*a).iter().map(|x| x + c)),
        Op::Square(a) => out.extend(v(*a).iter().map(|x| x * x)),
        Op::Sqrt(a) => out.extend(v(*a).iter().map(|&x| {
            if x < 0.0 {
                ok = false;
                f64::NAN
            } else {
                x.sqrt()
            }
        })),
        Op::Log(a) => out.extend(v(*a).iter().map(|&x| {
            if x <= 0.0 {
                ok = false;
                f64::NAN
            } else {
                x.ln()
            }
        })),
        Op::Exp(a) => out.extend(v(*a).iter().map(|x| x.exp())),
        Op::Softplus(a) => out.extend(v(*a).iter().map(|&x| softplus(x))),
        Op::Sum(a) => out.push(v(*a).iter().sum()),
        Op::Dot(a, b) => out.push(v(*a).iter().zip(v(*b)).map(|(x, y)| x * y).sum()),
        Op::MatVec { w, x, rows, cols } => {
            let (vw, vx) = (v(*w), v(*x));
            out.extend((0..*rows).map(|r| {
                vw[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(vx)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            }));
        }
        Op::Concat(parts) => {
            for &p in parts {
                out.extend_from_slice(v(p));
            }
        }
        Op::Index(a, i) => out.push(v(*a)[*i]),
        Op::ReluMean(m, s) | Op::ReluVar(m, s) => {
            let want_mean = matches!(op, Op::ReluMean(..));
            out.extend(v(*m).iter().zip(v(*s)).map(|(&mm, &ss)| {
                if ss < 0.0 {
                    ok = false;
                    return f64::NAN;
                }
                let p = ReluPartials::at(mm, ss);
                if want_mean {
                    p.mean
                } else {
                    p.var
                }
            }));
        }
    }
    if ok {
        Ok(())
    } else {
        Err(())
    }
}
