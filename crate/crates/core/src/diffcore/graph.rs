//! Define-by-run reverse-mode tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward sweep is a single reverse scan.
//! Forward-mode tangents (see [`super::dual`]) are ordinary nodes on the same
//! tape, which is what makes gradients of tangent-valued losses available.

use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Variable,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var, Var),
    MulScalar(Var, Var),
    Affine(Var, f64),
    Sin(Var),
    Cos(Var),
    Tanh(Var),
    Square(Var),
    Abs(Var),
    Mask(Var, Rc<[bool]>),
    Select(Rc<[bool]>, Var, Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy(Var, Rc<[usize]>, Tensor),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Variable => "variable",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Affine(..) => "affine",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Tanh(_) => "tanh",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Mask(..) => "mask",
            Op::Select(..) => "select",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Evaluation trace for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `var`, or `None` when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.adjoints.get(var.0).and_then(Option::as_ref)
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.item()
    }

    pub fn shape(&self, var: Var) -> [usize; 2] {
        self.nodes[var.0].value.shape()
    }

    pub(crate) fn param_leaves(&self) -> &[(Var, ParamId)] {
        &self.params
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_var(&self, v: Var, op: &'static str) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "{op}: node {} is not part of this graph",
                v.0
            )));
        }
        Ok(())
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.check_var(a, op)?;
        self.check_var(b, op)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Constant, value, false)
    }

    /// A free leaf whose adjoint is tracked (used for the δ offset).
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Variable, value, true)
    }

    /// Registers a trainable parameter from `store` as a leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let var = self.push(Op::Param, store.value(id).clone(), true)?;
        self.params.push((var, id));
        Ok(var)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a, "matmul")?;
        self.check_var(b, "matmul")?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}")));
        }
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), v, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), v, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), v, rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), v, rg)
    }

    /// `a + row` with `row` (`1×k`) broadcast over the rows of `a` (`n×k`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_var(a, "add_row")?;
        self.check_var(row, "add_row")?;
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr[0] != 1 || sr[1] != sa[1] {
            return Err(Error::shape("add_row", format!("{sa:?} + {sr:?}")));
        }
        let r = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        let cols = sa[1];
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += r[i % cols];
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(Op::AddRow(a, row), v, rg)
    }

    /// `a + s` for a `1×1` node `s`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check_var(a, "add_scalar")?;
        self.check_scalar(s, "add_scalar")?;
        let sv = self.scalar(s);
        let v = self.value(a).map(|x| x + sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(Op::AddScalar(a, s), v, rg)
    }

    /// `a · s` for a `1×1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check_var(a, "mul_scalar")?;
        self.check_scalar(s, "mul_scalar")?;
        let sv = self.scalar(s);
        let v = self.value(a).map(|x| x * sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(Op::MulScalar(a, s), v, rg)
    }

    fn check_scalar(&self, s: Var, op: &'static str) -> Result<()> {
        self.check_var(s, op)?;
        if self.shape(s) != [1, 1] {
            return Err(Error::shape(
                op,
                format!("expected 1×1 scalar, got {:?}", self.shape(s)),
            ));
        }
        Ok(())
    }

    /// `scale · a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.check_var(a, "affine")?;
        let v = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(a);
        self.push(Op::Affine(a, scale), v, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.affine(a, c, 0.0)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check_var(a, op.name())?;
        let v = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(op, v, rg)
    }

    /// Keeps entries of `a` where `mask` is set, zero elsewhere.
    pub fn mask(&mut self, a: Var, mask: Rc<[bool]>) -> Result<Var> {
        self.check_var(a, "mask")?;
        if mask.len() != self.value(a).len() {
            return Err(Error::shape("mask", "mask length differs from input"));
        }
        let src = self.value(a);
        let data = src
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| if m { x } else { 0.0 })
            .collect();
        let v = Tensor::new(src.rows(), src.cols(), data)?;
        let rg = self.rg(a);
        self.push(Op::Mask(a, mask), v, rg)
    }

    /// Elementwise `if mask { on_true } else { on_false }`.
    pub fn select(&mut self, mask: Rc<[bool]>, on_true: Var, on_false: Var) -> Result<Var> {
        self.same_shape(on_true, on_false, "select")?;
        if mask.len() != self.value(on_true).len() {
            return Err(Error::shape("select", "mask length differs from input"));
        }
        let (a, b) = (self.value(on_true), self.value(on_false));
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .zip(mask.iter())
            .map(|((&x, &y), &m)| if m { x } else { y })
            .collect();
        let v = Tensor::new(a.rows(), a.cols(), data)?;
        let rg = self.rg(on_true) || self.rg(on_false);
        self.push(Op::Select(mask, on_true, on_false), v, rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a, "concat_cols")?;
        self.check_var(b, "concat_cols")?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] {
            return Err(Error::shape("concat_cols", format!("{sa:?} ‖ {sb:?}")));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(sa[0] * (sa[1] + sb[1]));
        for r in 0..sa[0] {
            data.extend_from_slice(va.row_slice(r));
            data.extend_from_slice(vb.row_slice(r));
        }
        let v = Tensor::new(sa[0], sa[1] + sb[1], data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::ConcatCols(a, b), v, rg)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check_var(a, "slice_cols")?;
        let sa = self.shape(a);
        if start > end || end > sa[1] {
            return Err(Error::shape(
                "slice_cols",
                format!("range {start}..{end} outside {sa:?}"),
            ));
        }
        let va = self.value(a);
        let mut data = Vec::with_capacity(sa[0] * (end - start));
        for r in 0..sa[0] {
            data.extend_from_slice(&va.row_slice(r)[start..end]);
        }
        let v = Tensor::new(sa[0], end - start, data)?;
        let rg = self.rg(a);
        self.push(Op::SliceCols(a, start, end), v, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_var(a, "sum")?;
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), v, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check_var(a, "mean")?;
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(a);
        self.push(Op::Mean(a), v, rg)
    }

    /// Mean softmax cross-entropy of `logits` (`n×c`) against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Rc<[usize]>) -> Result<Var> {
        self.check_var(logits, "softmax_cross_entropy")?;
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if n == 0 {
            return Err(Error::shape("softmax_cross_entropy", "empty batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Usage(format!(
                "class index {bad} out of range for {c} logits"
            )));
        }
        let mut probs = Tensor::zeros(n, c);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            let log_z = z.ln() + max;
            total += log_z - row[label];
            for (k, &x) in row.iter().enumerate() {
                probs.set(r, k, (x - log_z).exp());
            }
        }
        let v = Tensor::scalar(total / n as f64);
        let rg = self.rg(logits);
        self.push(Op::SoftmaxCrossEntropy(logits, labels, probs), v, rg)
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called on an empty graph".into()));
        }
        self.check_var(loss, "backward")?;
        if self.shape(loss) != [1, 1] {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(node, &g, &mut adj);
            adj[i] = Some(g);
        }
        adj.resize(self.nodes.len(), None);
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(a) => a.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Constant | Op::Variable | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.rg(*row) {
                    acc(*row, g.sum_rows());
                }
            }
            Op::AddScalar(a, s) => {
                acc(*a, g.clone());
                acc(*s, Tensor::scalar(g.sum()));
            }
            Op::MulScalar(a, s) => {
                let sv = self.scalar(*s);
                acc(*a, g.map(|x| x * sv));
                if self.rg(*s) {
                    let d = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .sum();
                    acc(*s, Tensor::scalar(d));
                }
            }
            Op::Affine(a, scale) => acc(*a, g.map(|x| x * scale)),
            Op::Sin(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x * y.cos())),
            Op::Cos(a) => acc(*a, g.zip_map(self.value(*a), |x, y| -x * y.sin())),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |x, y| 2.0 * x * y)),
            Op::Abs(a) => acc(
                *a,
                g.zip_map(self.value(*a), |x, y| {
                    if y > 0.0 {
                        x
                    } else if y < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Mask(a, mask) => {
                let mut t = g.clone();
                for (x, &m) in t.data_mut().iter_mut().zip(mask.iter()) {
                    if !m {
                        *x = 0.0;
                    }
                }
                acc(*a, t);
            }
            Op::Select(mask, a, b) => {
                if self.rg(*a) {
                    let mut t = g.clone();
                    for (x, &m) in t.data_mut().iter_mut().zip(mask.iter()) {
                        if !m {
                            *x = 0.0;
                        }
                    }
                    acc(*a, t);
                }
                if self.rg(*b) {
                    let mut t = g.clone();
                    for (x, &m) in t.data_mut().iter_mut().zip(mask.iter()) {
                        if m {
                            *x = 0.0;
                        }
                    }
                    acc(*b, t);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                let rows = g.rows();
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = g.row_slice(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                if self.rg(*a) {
                    acc(*a, Tensor::new(rows, ca, ga).expect("concat split"));
                }
                if self.rg(*b) {
                    acc(*b, Tensor::new(rows, cb, gb).expect("concat split"));
                }
            }
            Op::SliceCols(a, start, end) => {
                let [rows, cols] = self.shape(*a);
                let mut t = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    for (c, &x) in (*start..*end).zip(g.row_slice(r)) {
                        t.set(r, c, x);
                    }
                }
                acc(*a, t);
            }
            Op::Sum(a) => {
                let [r, c] = self.shape(*a);
                acc(*a, Tensor::full(r, c, g.item()));
            }
            Op::Mean(a) => {
                let [r, c] = self.shape(*a);
                acc(*a, Tensor::full(r, c, g.item() / (r * c) as f64));
            }
            Op::SoftmaxCrossEntropy(logits, labels, probs) => {
                let n = labels.len() as f64;
                let scale = g.item() / n;
                let mut t = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    let v = t.get(r, l) - 1.0;
                    t.set(r, l, v);
                }
                acc(*logits, t.map(|x| x * scale));
            }
        }
    }

    /// `∂loss/∂scalar` for a `1×1` leaf that took part in the trace.
    pub fn grad_wrt_scalar(&self, loss: Var, scalar: Var) -> Result<f64> {
        self.check_scalar(scalar, "grad_wrt_scalar")?;
        if !self.rg(scalar) {
            return Err(Error::Usage(format!(
                "node {} is a constant; gradients are not tracked for it",
                scalar.0
            )));
        }
        let grads = self.backward(loss)?;
        grads.wrt(scalar).map(Tensor::item).ok_or_else(|| {
            Error::Usage(format!(
                "node {} does not participate in the computation of node {}",
                scalar.0, loss.0
            ))
        })
    }
}
