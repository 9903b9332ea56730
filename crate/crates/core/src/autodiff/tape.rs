use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Abs(Var),
    MaxConst(Var, f64),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SelectRows(Var, Vec<usize>),
    PairwiseDist(Var, Var),
    PairwiseSqDist(Var, Var),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Softplus(..) => "softplus",
            Op::Abs(..) => "abs",
            Op::MaxConst(..) => "max_const",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::SelectRows(..) => "select_rows",
            Op::PairwiseDist(..) => "pairwise_dist",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::Reshape(..) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::PairwiseDist(a, b)
            | Op::PairwiseSqDist(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Softplus(a)
            | Op::Abs(a)
            | Op::MaxConst(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SliceCols(a, ..)
            | Op::SelectRows(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are numbered in creation order, so every operation's inputs precede
/// it and the reverse sweep in [`Tape::backward`] is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `c = op(a) * op(b) + beta * c` for row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: buffer lengths match the logical dimensions and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, format!("expected a matrix, got shape {shape:?}"))),
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

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::shape("tape", format!("variable {} is not on this tape", v.0)))
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op.name().into() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a copy of `t` as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.values().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(vec![], vec![value])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        let n = self.node(v);
        debug_assert_eq!(n.value.len(), 1);
        n.value[0]
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(sa.to_vec())
        } else if numel(sa) == 1 {
            Ok(sb.to_vec())
        } else if numel(sb) == 1 {
            Ok(sa.to_vec())
        } else {
            Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let shape = self.binary_shape(op.name(), a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = numel(&shape);
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let x = if va.len() == 1 { va[0] } else { va[i] };
                let y = if vb.len() == 1 { vb[0] } else { vb[i] };
                f(x, y)
            })
            .collect();
        self.push(shape, out, op)
    }

    fn map(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check(a)?;
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    /// Elementwise product (scalar operands broadcast).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(Op::Scale(a, c), a, |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(Op::AddScalar(a), a, |x| x + c)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.add_scalar(n, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, 0.0, &mut out);
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    /// Adds a length-`n` row vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check(a)?;
        self.check(row)?;
        let (m, n) = dims2("add_row", self.shape(a))?;
        if numel(self.shape(row)) != n {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let (va, vr) = (self.value(a), self.value(row));
        let out: Vec<f64> = (0..m * n).map(|i| va[i] + vr[i % n]).collect();
        self.push(vec![m, n], out, Op::AddRow(a, row))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Sigmoid(a), a, stable_sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Tanh(a), a, f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Exp(a), a, f64::exp)
    }

    /// Natural log; non-positive inputs raise a numeric error.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Ln(a), a, f64::ln)
    }

    /// `ln(1 + e^a)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Softplus(a), a, softplus)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Abs(a), a, f64::abs)
    }

    /// Elementwise `max(a, c)`.
    pub fn max_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(Op::MaxConst(a, c), a, |x| x.max(c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.max_const(a, 0.0)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).iter().sum();
        self.push(vec![], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::shape("mean", "mean of an empty tensor"));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![], vec![m], Op::Mean(a))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            self.check(p)?;
            dims.push(dims2("concat_cols", self.shape(p))?);
        }
        let m = dims[0].0;
        if dims.iter().any(|&(r, _)| r != m) {
            return Err(Error::shape("concat_cols", format!("row counts differ: {dims:?}")));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check(a)?;
        let (m, n) = dims2("slice_cols", self.shape(a))?;
        if start > end || end > n {
            return Err(Error::shape(
                "slice_cols",
                format!("range {start}..{end} of {n} columns"),
            ));
        }
        let w = end - start;
        let va = self.value(a);
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&va[r * n + start..r * n + end]);
        }
        self.push(vec![m, w], out, Op::SliceCols(a, start, end))
    }

    /// Gathers the listed rows (repeats allowed).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.check(a)?;
        let (m, n) = dims2("select_rows", self.shape(a))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape("select_rows", format!("row {bad} out of {m}")));
        }
        let va = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&va[r * n..(r + 1) * n]);
        }
        self.push(vec![rows.len(), n], out, Op::SelectRows(a, rows.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(a)?;
        if numel(&shape) != numel(self.shape(a)) {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape(a), shape)));
        }
        let out = self.value(a).to_vec();
        self.push(shape, out, Op::Reshape(a))
    }

    fn pairwise(&mut self, a: Var, b: Var, squared: bool) -> Result<Var> {
        let name = if squared { "pairwise_sq_dist" } else { "pairwise_dist" };
        self.check(a)?;
        self.check(b)?;
        let (m, d) = dims2(name, self.shape(a))?;
        let (n, d2) = dims2(name, self.shape(b))?;
        if d != d2 {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ai = &va[i * d..(i + 1) * d];
            for j in 0..n {
                let bj = &vb[j * d..(j + 1) * d];
                let sq: f64 = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
                out.push(if squared { sq } else { sq.sqrt() });
            }
        }
        let op = if squared {
            Op::PairwiseSqDist(a, b)
        } else {
            Op::PairwiseDist(a, b)
        };
        self.push(vec![m, n], out, op)
    }

    /// Euclidean distances between the rows of `a` (`m x d`) and `b` (`n x d`).
    ///
    /// The derivative at coincident points is taken as zero.
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.pairwise(a, b, false)
    }

    /// Squared Euclidean distances between the rows of `a` and `b`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.pairwise(a, b, true)
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Gradients from a previous sweep are discarded first. Nodes that do not
    /// depend on a differentiable leaf are skipped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if numel(self.shape(loss)) != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if node.op.inputs().iter().any(|v| v.0 >= idx) {
                return Err(Error::shape("backward", format!("node {idx} consumes a later node")));
            }
            let contributions = self.local_backward(idx, &g);
            self.grads[idx] = Some(g);
            for (var, contrib) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut self.grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        if let Some((i, _)) = self
            .grads
            .iter()
            .enumerate()
            .find(|(_, g)| g.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite())))
        {
            return Err(Error::NonFinite {
                op: format!("backward through {}", self.nodes[i].op.name()),
            });
        }
        Ok(())
    }

    /// Reduce a broadcast gradient back onto a scalar operand when needed.
    fn fit(&self, v: Var, g: Vec<f64>) -> Vec<f64> {
        if self.node(v).value.len() == 1 && g.len() != 1 {
            vec![g.iter().sum()]
        } else {
            g
        }
    }

    fn local_backward(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let bcast = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        res.push((*v, self.fit(*v, g.to_vec())));
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    res.push((*a, self.fit(*a, g.to_vec())));
                }
                if needs(b) {
                    res.push((*b, self.fit(*b, g.iter().map(|x| -x).collect())));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if needs(a) {
                    let ga = g.iter().enumerate().map(|(i, gi)| gi * bcast(vb, i)).collect();
                    res.push((*a, self.fit(*a, ga)));
                }
                if needs(b) {
                    let gb = g.iter().enumerate().map(|(i, gi)| gi * bcast(va, i)).collect();
                    res.push((*b, self.fit(*b, gb)));
                }
            }
            Op::Scale(a, c) => res.push((*a, g.iter().map(|x| c * x).collect())),
            Op::AddScalar(a) | Op::Reshape(a) => res.push((*a, g.to_vec())),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if needs(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b), true, 0.0, &mut ga);
                    res.push((*a, ga));
                }
                if needs(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a), true, g, false, 0.0, &mut gb);
                    res.push((*b, gb));
                }
            }
            Op::AddRow(a, row) => {
                if needs(a) {
                    res.push((*a, g.to_vec()));
                }
                if needs(row) {
                    let n = self.shape(*a)[1];
                    let mut gr = vec![0.0; n];
                    for (i, gi) in g.iter().enumerate() {
                        gr[i % n] += gi;
                    }
                    res.push((*row, gr));
                }
            }
            Op::Sigmoid(a) => res.push((*a, g.iter().zip(out).map(|(gi, y)| gi * y * (1.0 - y)).collect())),
            Op::Tanh(a) => res.push((*a, g.iter().zip(out).map(|(gi, y)| gi * (1.0 - y * y)).collect())),
            Op::Exp(a) => res.push((*a, g.iter().zip(out).map(|(gi, y)| gi * y).collect())),
            Op::Ln(a) => res.push((*a, g.iter().zip(self.value(*a)).map(|(gi, x)| gi / x).collect())),
            Op::Softplus(a) => res.push((
                *a,
                g.iter()
                    .zip(self.value(*a))
                    .map(|(gi, &x)| gi * stable_sigmoid(x))
                    .collect(),
            )),
            Op::Abs(a) => res.push((
                *a,
                g.iter()
                    .zip(self.value(*a))
                    .map(|(gi, &x)| {
                        if x > 0.0 {
                            *gi
                        } else if x < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )),
            Op::MaxConst(a, c) => res.push((
                *a,
                g.iter()
                    .zip(self.value(*a))
                    .map(|(gi, &x)| if x > *c { *gi } else { 0.0 })
                    .collect(),
            )),
            Op::Sum(a) => res.push((*a, vec![g[0]; self.value(*a).len()])),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                res.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let m = node.shape[0];
                let mut offset = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    if needs(p) {
                        let mut gp = Vec::with_capacity(m * c);
                        for r in 0..m {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        res.push((*p, gp));
                    }
                    offset += c;
                }
            }
            Op::SliceCols(a, start, end) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let w = end - start;
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    ga[r * n + start..r * n + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                res.push((*a, ga));
            }
            Op::SelectRows(a, rows) => {
                let n = self.shape(*a)[1];
                let mut ga = vec![0.0; self.value(*a).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..n {
                        ga[r * n + c] += g[k * n + c];
                    }
                }
                res.push((*a, ga));
            }
            Op::PairwiseDist(a, b) | Op::PairwiseSqDist(a, b) => {
                let squared = matches!(node.op, Op::PairwiseSqDist(..));
                let (m, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut ga = vec![0.0; m * d];
                let mut gb = vec![0.0; n * d];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let coef = if squared {
                            2.0 * gij
                        } else {
                            let dist = out[i * n + j];
                            if dist == 0.0 {
                                continue;
                            }
                            gij / dist
                        };
                        for c in 0..d {
                            let diff = coef * (va[i * d + c] - vb[j * d + c]);
                            ga[i * d + c] += diff;
                            gb[j * d + c] -= diff;
                        }
                    }
                }
                if needs(a) {
                    res.push((*a, ga));
                }
                if needs(b) {
                    res.push((*b, gb));
                }
            }
        }
        res
    }

    /// Gradient of the last [`backward`](Self::backward) loss w.r.t. `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`grad`](Self::grad) but unreached nodes read as zeros.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.value(v).len()])
    }

    /// Adds the gradient of `v` into `t.grad`.
    pub fn accumulate_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        if t.len() != self.value(v).len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("tape node {:?} vs tensor {:?}", self.shape(v), t.shape()),
            ));
        }
        if let Some(g) = self.grad(v) {
            t.grad_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    /// Snapshot of a node as a standalone tensor (gradient included when available).
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_parts(n.shape.clone(), n.value.clone(), self.grad_or_zeros(v), n.requires_grad)
    }
}
