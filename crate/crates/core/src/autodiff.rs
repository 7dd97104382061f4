//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass in order. Calling
//! [`Tape::backward`] walks the records in exact reverse order and applies each
//! operation's vector-Jacobian product. Tapes are rebuilt for every forward
//! pass, so operation constants (temperatures, subset sizes, labels) can change
//! freely between steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor with an optional gradient slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr")]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(skip)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

#[derive(Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TryFrom<TensorRepr> for Tensor {
    type Error = Error;

    fn try_from(r: TensorRepr) -> Result<Self> {
        Tensor::new(r.shape, r.values)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![r.len()],
                });
            }
            values.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, values)
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.values[0]
    }

    /// Rows and columns of a 2-D tensor. A 1-D tensor is treated as one row.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            [c] => Some((1, *c)),
            _ => None,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        let cols = self.shape.last().copied().unwrap_or(1);
        self.values[row * cols + col]
    }

    /// Copies out the given rows of a 2-D tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let (_, cols) = self.dims2().expect("select_rows on a matrix");
        let mut values = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            values.extend_from_slice(&self.values[r * cols..(r + 1) * cols]);
        }
        Tensor {
            shape: vec![rows.len(), cols],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    fn is_scalar(&self) -> bool {
        self.values.len() == 1 && self.shape.iter().all(|&s| s == 1)
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operation kinds accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Neg,
    Abs,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Neg,
    Abs,
    Scale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SoftmaxRows(Var),
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Unary(Unary, Var),
    Reduce {
        kind: Reduction,
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(Var),
    Narrow {
        x: Var,
        offset: usize,
    },
    PairwiseDiff(Var),
    StraightThrough {
        relaxed: Var,
    },
    MaskColumns {
        x: Var,
        mask: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    MaskedMse {
        pred: Var,
        targets: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of the operations of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records an input tensor. It participates in backward iff the tensor
    /// was marked with [`Tensor::requiring_grad`].
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Copies `x` as a constant, cutting gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = Tensor {
            shape: self.value(x).shape.clone(),
            values: self.value(x).values.clone(),
            requires_grad: false,
            grad: None,
        };
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a recorded tensor, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if cfg!(debug_assertions) && values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value: Tensor {
                shape,
                values,
                requires_grad,
                grad: None,
            },
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = match ta.shape.as_slice() {
            [n, k] => (*n, *k),
            _ => return Err(dim_err("matmul", ta, tb)),
        };
        let (k2, m) = match tb.shape.as_slice() {
            [k2, m] => (*k2, *m),
            _ => return Err(dim_err("matmul", ta, tb)),
        };
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let out = matmul_raw(&ta.values, &tb.values, n, k, m);
        let rg = ta.requires_grad || tb.requires_grad;
        self.push("matmul", vec![n, m], out, Op::MatMul(a, b), rg)
    }

    /// Row-wise softmax of a 2-D tensor (a 1-D tensor is one row).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, cols) = t.dims2().ok_or_else(|| dim_err("softmax_rows", t, t))?;
        let mut out = t.values.clone();
        if cols > 0 {
            for row in out.chunks_mut(cols) {
                softmax_in_place(row);
            }
        }
        let (shape, rg) = (t.shape.clone(), t.requires_grad);
        self.push("softmax_rows", shape, out, Op::SoftmaxRows(x), rg)
    }

    /// Applies a pointwise operation. Binary kinds require `b`; its shape must
    /// equal `a`'s or be a length-`C` row broadcast against an `R x C` matrix.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let binary = match kind {
            Elementwise::Add => Some(Binary::Add),
            Elementwise::Sub => Some(Binary::Sub),
            Elementwise::Mul => Some(Binary::Mul),
            _ => None,
        };
        if let Some(kind) = binary {
            let b = b.ok_or_else(|| Error::contract("binary elementwise op needs two operands"))?;
            return self.binary(kind, a, b);
        }
        let unary = match kind {
            Elementwise::Relu => Unary::Relu,
            Elementwise::Neg => Unary::Neg,
            Elementwise::Abs => Unary::Abs,
            Elementwise::Scale(c) => Unary::Scale(c),
            _ => unreachable!(),
        };
        let t = self.value(a);
        let out: Vec<f64> = t
            .values
            .iter()
            .map(|&v| match unary {
                Unary::Relu => v.max(0.0),
                Unary::Neg => -v,
                Unary::Abs => v.abs(),
                Unary::Scale(c) => c * v,
            })
            .collect();
        let (shape, rg) = (t.shape.clone(), t.requires_grad);
        self.push("elementwise", shape, out, Op::Unary(unary, a), rg)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let broadcast = if ta.shape == tb.shape {
            false
        } else {
            match (ta.shape.as_slice(), tb.shape.as_slice()) {
                ([_, c], [c2]) | ([_, c], [1, c2]) if c == c2 => true,
                _ => return Err(dim_err("elementwise", ta, tb)),
            }
        };
        let cols = tb.values.len().max(1);
        let out: Vec<f64> = ta
            .values
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if broadcast {
                    tb.values[i % cols]
                } else {
                    tb.values[i]
                };
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let rg = ta.requires_grad || tb.requires_grad;
        let shape = ta.shape.clone();
        self.push(
            "elementwise",
            shape,
            out,
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            },
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::Relu, x, None)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::Neg, x, None)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::Abs, x, None)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.elementwise(Elementwise::Scale(c), x, None)
    }

    /// Sums or averages over `axis`, or over everything when `axis` is `None`.
    /// The reduced axis is removed from the output shape.
    pub fn reduce(&mut self, kind: Reduction, x: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner, shape) = match axis {
            None => (1, t.values.len(), 1, Vec::new()),
            Some(ax) if ax < t.shape.len() => {
                let outer = t.shape[..ax].iter().product();
                let inner = t.shape[ax + 1..].iter().product();
                let mut shape = t.shape.clone();
                shape.remove(ax);
                (outer, t.shape[ax], inner, shape)
            }
            Some(ax) => {
                return Err(Error::Dimension {
                    op: "reduce",
                    lhs: t.shape.clone(),
                    rhs: vec![ax],
                })
            }
        };
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += t.values[base + i];
                }
            }
        }
        if kind == Reduction::Mean && len > 0 {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = t.requires_grad;
        self.push(
            "reduce",
            shape,
            out,
            Op::Reduce {
                kind,
                x,
                outer,
                len,
                inner,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduction::Sum, x, None)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduction::Mean, x, None)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.values.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: t.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let (values, rg) = (t.values.clone(), t.requires_grad);
        self.push("reshape", shape.to_vec(), values, Op::Reshape(x), rg)
    }

    /// Takes a contiguous range of the flat values and gives it `shape`.
    pub fn narrow(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let len: usize = shape.iter().product();
        if offset + len > t.values.len() {
            return Err(Error::Dimension {
                op: "narrow",
                lhs: t.shape.clone(),
                rhs: vec![offset, len],
            });
        }
        let (values, rg) = (t.values[offset..offset + len].to_vec(), t.requires_grad);
        self.push(
            "narrow",
            shape.to_vec(),
            values,
            Op::Narrow { x, offset },
            rg,
        )
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = match t.shape.as_slice() {
            [r, c] => (*r, *c),
            _ => return Err(dim_err("slice_rows", t, t)),
        };
        if start > end || end > rows {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: t.shape.clone(),
                rhs: vec![start, end],
            });
        }
        self.narrow(x, start * cols, &[end - start, cols])
    }

    /// `D[m, n] = s[m] - s[n]` for a vector `s`.
    pub fn pairwise_diff(&mut self, s: Var) -> Result<Var> {
        let t = self.value(s);
        if t.shape.len() != 1 {
            return Err(dim_err("pairwise_diff", t, t));
        }
        let d = t.values.len();
        let mut out = vec![0.0; d * d];
        for m in 0..d {
            for n in 0..d {
                out[m * d + n] = t.values[m] - t.values[n];
            }
        }
        let rg = t.requires_grad;
        self.push("pairwise_diff", vec![d, d], out, Op::PairwiseDiff(s), rg)
    }

    /// Emits `hard` in the forward pass while routing the incoming gradient
    /// unchanged to `relaxed` in the backward pass.
    pub fn straight_through(&mut self, hard: Vec<f64>, relaxed: Var) -> Result<Var> {
        let t = self.value(relaxed);
        if hard.len() != t.values.len() {
            return Err(Error::Dimension {
                op: "straight_through",
                lhs: vec![hard.len()],
                rhs: t.shape.clone(),
            });
        }
        let (shape, rg) = (t.shape.clone(), t.requires_grad);
        self.push(
            "straight_through",
            shape,
            hard,
            Op::StraightThrough { relaxed },
            rg,
        )
    }

    /// Column mask `x ⊙ mask` for `x: N x d`, `mask: d`. Columns whose mask
    /// value is exactly zero produce exact zeros regardless of their inputs.
    pub fn mask_columns(&mut self, x: Var, mask: Var) -> Result<Var> {
        let (tx, tm) = (self.value(x), self.value(mask));
        let cols = match (tx.shape.as_slice(), tm.shape.as_slice()) {
            ([_, c], [c2]) if c == c2 => *c,
            _ => return Err(dim_err("mask_columns", tx, tm)),
        };
        let out: Vec<f64> = tx
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let m = tm.values[i % cols];
                if m == 0.0 {
                    0.0
                } else {
                    v * m
                }
            })
            .collect();
        let rg = tx.requires_grad || tm.requires_grad;
        let shape = tx.shape.clone();
        self.push("mask_columns", shape, out, Op::MaskColumns { x, mask }, rg)
    }

    /// Mean softmax cross-entropy over the rows whose label is present.
    /// With no labeled rows the loss is 0 and no gradient flows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = match t.shape.as_slice() {
            [r, c] => (*r, *c),
            _ => return Err(dim_err("softmax_cross_entropy", t, t)),
        };
        if labels.len() != rows {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: t.shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        let mut probs = t.values.clone();
        let mut total = 0.0;
        let mut count = 0;
        for (i, label) in labels.iter().enumerate() {
            let row = &mut probs[i * cols..(i + 1) * cols];
            let Some(y) = *label else { continue };
            if y >= cols {
                return Err(Error::data(
                    Some(i),
                    None,
                    format!("class {y} out of range for {cols} classes"),
                ));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            count += 1;
            softmax_in_place(row);
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = t.requires_grad;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
            count,
        };
        self.push("softmax_cross_entropy", Vec::new(), vec![loss], op, rg)
    }

    /// Mean squared error over the entries whose target is not NaN.
    pub fn masked_mse(&mut self, pred: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(pred);
        if targets.len() != t.values.len() {
            return Err(Error::Dimension {
                op: "masked_mse",
                lhs: t.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        let mut count = 0;
        for (p, y) in t.values.iter().zip(targets) {
            if !y.is_nan() {
                total += (p - y) * (p - y);
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = t.requires_grad;
        let op = Op::MaskedMse {
            pred,
            targets: targets.to_vec(),
            count,
        };
        self.push("masked_mse", Vec::new(), vec![loss], op, rg)
    }

    /// Propagates d`loss`/d(everything) back through the tape. Gradients are
    /// added to whatever each tensor already holds, so repeated calls
    /// accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad {
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
            if cfg!(debug_assertions) && g.iter().any(|v| v.is_nan()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            let slot = &mut self.nodes[idx].value.grad;
            match slot {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.shape[0], ta.shape[1]);
                let m = tb.shape[1];
                if self.needs_grad(*a) {
                    let da = slot(grads, *a, n * k);
                    for i in 0..n {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += g[i * m + j] * tb.values[kk * m + j];
                            }
                            da[i * k + kk] += acc;
                        }
                    }
                }
                if self.needs_grad(*b) {
                    let db = slot(grads, *b, k * m);
                    for i in 0..n {
                        for kk in 0..k {
                            let aik = ta.values[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            let grow = &g[i * m..(i + 1) * m];
                            let drow = &mut db[kk * m..(kk + 1) * m];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += aik * gv;
                            }
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value.values;
                let (_, cols) = node.value.dims2().unwrap();
                let dx = slot(grads, *x, y.len());
                for r in 0..y.len() / cols.max(1) {
                    let range = r * cols..(r + 1) * cols;
                    let dot: f64 = g[range.clone()]
                        .iter()
                        .zip(&y[range.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for i in range {
                        dx[i] += y[i] * (g[i] - dot);
                    }
                }
            }
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = tb.values.len().max(1);
                let bidx = |i: usize| if *broadcast { i % cols } else { i };
                if self.needs_grad(*a) {
                    let da = slot(grads, *a, ta.values.len());
                    for (i, gv) in g.iter().enumerate() {
                        da[i] += match kind {
                            Binary::Add | Binary::Sub => *gv,
                            Binary::Mul => gv * tb.values[bidx(i)],
                        };
                    }
                }
                if self.needs_grad(*b) {
                    let db = slot(grads, *b, tb.values.len());
                    for (i, gv) in g.iter().enumerate() {
                        db[bidx(i)] += match kind {
                            Binary::Add => *gv,
                            Binary::Sub => -gv,
                            Binary::Mul => gv * ta.values[i],
                        };
                    }
                }
            }
            Op::Unary(kind, x) => {
                let tx = self.value(*x);
                let dx = slot(grads, *x, tx.values.len());
                for (i, gv) in g.iter().enumerate() {
                    let v = tx.values[i];
                    dx[i] += match kind {
                        Unary::Relu => {
                            if v > 0.0 {
                                *gv
                            } else {
                                0.0
                            }
                        }
                        Unary::Neg => -gv,
                        Unary::Abs => {
                            if v > 0.0 {
                                *gv
                            } else if v < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        }
                        Unary::Scale(c) => c * gv,
                    };
                }
            }
            Op::Reduce {
                kind,
                x,
                outer,
                len,
                inner,
            } => {
                let scale = match kind {
                    Reduction::Sum => 1.0,
                    Reduction::Mean => 1.0 / (*len).max(1) as f64,
                };
                let dx = slot(grads, *x, outer * len * inner);
                for o in 0..*outer {
                    for a in 0..*len {
                        let base = (o * len + a) * inner;
                        for i in 0..*inner {
                            dx[base + i] += scale * g[o * inner + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                let dx = slot(grads, *x, g.len());
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            Op::Narrow { x, offset } => {
                let n = self.value(*x).values.len();
                let dx = slot(grads, *x, n);
                for (i, v) in g.iter().enumerate() {
                    dx[offset + i] += v;
                }
            }
            Op::PairwiseDiff(s) => {
                let d = self.value(*s).values.len();
                let ds = slot(grads, *s, d);
                for m in 0..d {
                    for n in 0..d {
                        let v = g[m * d + n];
                        ds[m] += v;
                        ds[n] -= v;
                    }
                }
            }
            Op::StraightThrough { relaxed } => {
                let dr = slot(grads, *relaxed, g.len());
                dr.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            Op::MaskColumns { x, mask } => {
                let (tx, tm) = (self.value(*x), self.value(*mask));
                let cols = tm.values.len();
                if self.needs_grad(*x) {
                    let dx = slot(grads, *x, tx.values.len());
                    for (i, gv) in g.iter().enumerate() {
                        dx[i] += gv * tm.values[i % cols];
                    }
                }
                if self.needs_grad(*mask) {
                    let dm = slot(grads, *mask, cols);
                    for (i, gv) in g.iter().enumerate() {
                        dm[i % cols] += gv * tx.values[i];
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let cols = probs.len() / labels.len().max(1);
                let scale = g[0] / *count as f64;
                let dl = slot(grads, *logits, probs.len());
                for (i, label) in labels.iter().enumerate() {
                    let Some(y) = *label else { continue };
                    for c in 0..cols {
                        let onehot = if c == y { 1.0 } else { 0.0 };
                        dl[i * cols + c] += scale * (probs[i * cols + c] - onehot);
                    }
                }
            }
            Op::MaskedMse {
                pred,
                targets,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let tp = self.value(*pred);
                let scale = 2.0 * g[0] / *count as f64;
                let dp = slot(grads, *pred, targets.len());
                for (i, y) in targets.iter().enumerate() {
                    if !y.is_nan() {
                        dp[i] += scale * (tp.values[i] - y);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// Max-shifted softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Compares reverse-mode gradients of the scalar function `f` at `x` against
/// central finite differences and returns the largest relative error, using
/// `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    Ok(grad_check_detailed(f, x, eps)?.max_rel_error)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
}

pub fn grad_check_detailed<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::contract(format!(
            "grad_check needs eps > 0, got {eps}"
        )));
    }
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone().requiring_grad());
    let out = f(&mut tape, input)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(input)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.leaf(Tensor::new(x.shape.clone(), values)?);
        let out = f(&mut tape, input)?;
        Ok(tape.value(out).item())
    };
    let mut numeric = Vec::with_capacity(x.numel());
    let mut max_rel_error: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.values.clone();
        plus[i] += eps;
        let mut minus = x.values.clone();
        minus[i] -= eps;
        let num = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let ana = analytic[i];
        let denom = ana.abs().max(num.abs()).max(1e-8);
        max_rel_error = max_rel_error.max((ana - num).abs() / denom);
        numeric.push(num);
    }
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Case<'a> = Box<dyn Fn(&mut Tape, Var) -> Result<Var> + 'a>;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matmul_identity_and_projection() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let out = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(out).values(), &[1.0, 2.0, 3.0, 4.0]);

        let p = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        let v = t.constant(Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap());
        let out = t.matmul(p, v).unwrap();
        assert_eq!(t.value(out).values(), &[5.0, 0.0]);
        assert_eq!(t.value(out).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(&mut rng, &[4, 2]);
        let a = random(&mut rng, &[3, 4]);
        let err_a = grad_check(
            |t, a| {
                let b = t.constant(b.clone());
                let y = t.matmul(a, b)?;
                t.sum(y)
            },
            &a,
            1e-5,
        )
        .unwrap();
        let err_b = grad_check(
            |t, b| {
                let a = t.constant(a.clone());
                let y = t.matmul(a, b)?;
                t.sum(y)
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err_a < 1e-6 && err_b < 1e-6, "{err_a} {err_b}");
    }

    #[test]
    fn softmax_rows_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
        let y = t.softmax_rows(x).unwrap();
        for v in t.value(y).values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        let y = t.softmax_rows(x).unwrap();
        assert_eq!(t.value(y).values()[0], 1.0);
        assert!(t.value(y).values()[1] < 1e-300);

        let x = t.constant(Tensor::from_rows(&[vec![0.0, -1.0]]).unwrap());
        let y = t.softmax_rows(x).unwrap();
        // 1 / (1 + e^-1) evaluated directly
        let p0 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((t.value(y).values()[0] - p0).abs() < 1e-15);
        assert!((t.value(y).values()[0] - 0.7311).abs() < 1e-4);
        assert!((t.value(y).values()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let m = t.constant(Tensor::vector(vec![0.0, 1.0, 0.0]));
        let y = t.mul(a, m).unwrap();
        assert_eq!(t.value(y).values(), &[0.0, 2.0, 0.0]);
        let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).values(), &[0.0, 0.0, 2.0]);
        let bad = t.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.add(a, bad), Err(Error::Dimension { .. })));
        assert!(t.elementwise(Elementwise::Add, a, None).is_err());
    }

    #[test]
    fn relu_and_abs_subgradient_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 0.0]).requiring_grad());
        let r = t.relu(x).unwrap();
        let a = t.abs(x).unwrap();
        let both = t.add(r, a).unwrap();
        let s = t.sum(both).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_mul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[2, 3]);
        let m = random(&mut rng, &[3]);
        let wrt_x = grad_check(
            |t, x| {
                let m = t.constant(m.clone());
                let y = t.mul(x, m)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            },
            &x,
            1e-5,
        )
        .unwrap();
        let wrt_m = grad_check(
            |t, m| {
                let x = t.constant(x.clone());
                let y = t.mul(x, m)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            },
            &m,
            1e-5,
        )
        .unwrap();
        assert!(wrt_x < 1e-6 && wrt_m < 1e-6, "{wrt_x} {wrt_m}");
    }

    #[test]
    fn reduce_examples() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.sum(v).unwrap();
        assert_eq!(t.value(s).item(), 6.0);
        let m = t.leaf(
            Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]])
                .unwrap()
                .requiring_grad(),
        );
        let col_mean = t.reduce(Reduction::Mean, m, Some(0)).unwrap();
        assert_eq!(t.value(col_mean).values(), &[2.0, 4.0]);
        assert!(t.reduce(Reduction::Sum, m, Some(2)).is_err());

        let total = t.mean(m).unwrap();
        t.backward(total).unwrap();
        assert_eq!(t.grad(m).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::vector(vec![1.0, 2.0]).requiring_grad());
        assert!(matches!(t.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, -2.0, 0.5]).requiring_grad());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        let once = t.grad(x).unwrap().to_vec();
        t.backward(s).unwrap();
        let twice = t.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn gradients_accumulate_over_multiple_uses() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0).requiring_grad());
        let y = t.add(x, x).unwrap();
        let z = t.mul(y, x).unwrap(); // 2x^2
        t.backward(z).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn grad_check_quadratic_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.7, 2.0, 0.0]);
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
        assert!(grad_check(|t, x| t.sum(x), &x, 0.0).is_err());
    }

    #[test]
    fn softmax_of_matmul_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&mut rng, &[4, 4]);
        let c = random(&mut rng, &[4, 4]);
        let x = random(&mut rng, &[4, 4]);
        let err = grad_check(
            |t, x| {
                let w = t.constant(w.clone());
                let c = t.constant(c.clone());
                let h = t.matmul(x, w)?;
                let p = t.softmax_rows(h)?;
                let y = t.mul(p, c)?;
                t.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn every_op_passes_grad_check_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let x = random(&mut rng, &[3, 4]);
            let w = random(&mut rng, &[3, 4]);
            let row = random(&mut rng, &[4]);
            let cases: Vec<(&str, Case)> = vec![
                (
                    "sub_bcast",
                    Box::new(|t, x| {
                        let r = t.constant(row.clone());
                        let y = t.sub(x, r)?;
                        let y = t.mul(y, y)?;
                        t.sum(y)
                    }),
                ),
                (
                    "neg_scale",
                    Box::new(|t, x| {
                        let y = t.neg(x)?;
                        let y = t.scale(y, 0.7)?;
                        let w = t.constant(w.clone());
                        let y = t.mul(y, w)?;
                        t.sum(y)
                    }),
                ),
                (
                    "reduce_axis",
                    Box::new(|t, x| {
                        let y = t.reduce(Reduction::Mean, x, Some(1))?;
                        let y = t.mul(y, y)?;
                        let z = t.reduce(Reduction::Sum, x, Some(0))?;
                        let z = t.mul(z, z)?;
                        let a = t.sum(y)?;
                        let b = t.mean(z)?;
                        t.add(a, b)
                    }),
                ),
                (
                    "narrow_reshape",
                    Box::new(|t, x| {
                        let y = t.slice_rows(x, 1, 3)?;
                        let y = t.reshape(y, &[8])?;
                        let y = t.mul(y, y)?;
                        t.sum(y)
                    }),
                ),
                (
                    "mask_columns",
                    Box::new(|t, x| {
                        let r = t.constant(row.clone());
                        let y = t.mask_columns(x, r)?;
                        let y = t.mul(y, y)?;
                        t.sum(y)
                    }),
                ),
                (
                    "xent",
                    Box::new(|t, x| t.softmax_cross_entropy(x, &[Some(1), None, Some(3)])),
                ),
                (
                    "mse",
                    Box::new(|t, x| {
                        let mut targets = w.values().to_vec();
                        targets[5] = f64::NAN;
                        t.masked_mse(x, &targets)
                    }),
                ),
            ];
            for (name, f) in cases {
                let err = grad_check(f, &x, 1e-5).unwrap();
                assert!(err < 1e-4, "{name}: {err}");
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let logits =
            t.constant(Tensor::from_rows(&[vec![1000.0, -1000.0], vec![-1000.0, 1000.0]]).unwrap());
        let l = t
            .softmax_cross_entropy(logits, &[Some(0), Some(1)])
            .unwrap();
        assert!(t.value(l).item().abs() < 1e-12);
        let uniform = t.constant(Tensor::zeros(&[3, 5]));
        let l = t
            .softmax_cross_entropy(uniform, &[Some(0), Some(4), Some(2)])
            .unwrap();
        assert!((t.value(l).item() - 5f64.ln()).abs() < 1e-12);
        assert!(t
            .softmax_cross_entropy(uniform, &[Some(5), None, None])
            .is_err());

        let x = t.leaf(Tensor::zeros(&[2, 3]).requiring_grad());
        let l = t.softmax_cross_entropy(x, &[None, None]).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        t.backward(l).unwrap();
        assert!(t.grad(x).unwrap_or(&[0.0]).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mse_example() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let l = t.masked_mse(p, &[0.0, 0.0]).unwrap();
        assert_eq!(t.value(l).item(), 2.5);
    }

    #[test]
    fn matmul_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, &[7, 9]);
        let b = random(&mut rng, &[9, 5]);
        let run = || {
            let mut t = Tape::new();
            let (a, b) = (t.constant(a.clone()), t.constant(b.clone()));
            let y = t.matmul(a, b).unwrap();
            let s = t.reduce(Reduction::Sum, y, Some(0)).unwrap();
            t.value(s).values().to_vec()
        };
        let (r1, r2) = (run(), run());
        assert!(r1.iter().zip(&r2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_distributions(row in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let mut t = Tape::new();
            let x = t.constant(Tensor::vector(row));
            let y = t.softmax_rows(x).unwrap();
            let vals = t.value(y).values();
            let total: f64 = vals.iter().sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-12);
            proptest::prop_assert!(vals.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }
}
