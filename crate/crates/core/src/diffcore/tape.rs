//! Reverse-mode differentiation over a linear record of operations.
//!
//! A [`Tape`] owns every value computed during a forward pass. Operations
//! append a node whose inputs always have smaller indices, so the record is
//! topologically ordered by construction and a single reverse sweep visits
//! each node once.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Exp,
    Log,
    Abs,
    /// Multiply by a constant.
    Scale(f64),
}

impl ElementwiseOp {
    fn is_binary(self) -> bool {
        matches!(
            self,
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul | ElementwiseOp::Div
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    /// Index of the maximum, lowest index on ties. Produces a constant: the
    /// result is not differentiable and gradients do not flow through it.
    Argmax,
}

/// Which side of a binary operation, if any, is a broadcast scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: ElementwiseOp,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Unary {
        kind: ElementwiseOp,
        a: Var,
    },
    AddRow {
        a: Var,
        bias: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reduce {
        kind: ReduceOp,
        a: Var,
        axis: Option<usize>,
        picked: Vec<usize>,
    },
    GatherRows {
        a: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Stack(Vec<Var>),
    NormalizeRows {
        a: Var,
        norms: Vec<f64>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// True when a gradient-requiring leaf is reachable through the inputs.
    needs_grad: bool,
}

/// Ordered record of executed differentiable operations.
///
/// Leaf gradient buffers persist across [`Tape::backward`] calls and
/// accumulate; call [`Tape::zero_grad`] before a fresh backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// Distance to the nearest non-differentiable point among recorded
    /// operations on a gradient path: the smallest `|input|` of any `relu`
    /// or `abs`, and the smallest gap between the largest and second-largest
    /// entry of any `max` reduction. Infinite when there are none.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in self.nodes.iter().filter(|n| n.needs_grad) {
            match node.op {
                Op::Unary {
                    kind: ElementwiseOp::Relu | ElementwiseOp::Abs,
                    a,
                } => {
                    margin = self.value(a).data().iter().fold(margin, |m, v| m.min(v.abs()));
                }
                Op::Reduce {
                    kind: ReduceOp::Max,
                    a,
                    axis,
                    ..
                } => {
                    let va = self.value(a);
                    let (groups, _) = reduction_groups(va.shape(), axis).expect("recorded reduction is valid");
                    for g in groups.iter().filter(|g| g.len() > 1) {
                        let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                        for &i in g {
                            let v = va.data()[i];
                            if v > first {
                                second = first;
                                first = v;
                            } else if v > second {
                                second = v;
                            }
                        }
                        margin = margin.min(first - second);
                    }
                }
                _ => {}
            }
        }
        margin
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input tensor. Only leaves with `requires_grad` receive a
    /// gradient buffer on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf) && self.nodes[v.0].needs_grad
    }

    /// Gradient accumulated into a leaf by previous backward passes, if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Drops every node recorded after the first `len`. Handles to the
    /// dropped nodes must not be used afterwards.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Copies a value into a fresh constant so no gradient flows back
    /// through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // -- element-wise ---------------------------------------------------

    /// Applies an element-wise operation. Binary kinds need `b`; unary
    /// kinds reject it. Binary operands must have equal shapes or one of
    /// them must hold a single value.
    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind.is_binary(), b) {
            (true, Some(b)) => self.binary(kind, a, b),
            (true, None) => Err(Error::invalid(format!("{kind:?} needs two operands"))),
            (false, None) => self.unary(kind, a),
            (false, Some(_)) => Err(Error::invalid(format!("{kind:?} takes one operand"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Div, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary_unchecked(ElementwiseOp::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Log, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary_unchecked(ElementwiseOp::Abs, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary_unchecked(ElementwiseOp::Scale(c), a)
    }

    fn binary(&mut self, kind: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let bcast = if va.shape() == vb.shape() {
            Broadcast::None
        } else if vb.len() == 1 {
            Broadcast::Rhs
        } else if va.len() == 1 {
            Broadcast::Lhs
        } else {
            return Err(Error::shape(
                "elementwise",
                format!("{kind:?} of {:?} and {:?}", va.shape(), vb.shape()),
            ));
        };
        if kind == ElementwiseOp::Div && vb.data().iter().any(|&x| x == 0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        let f: fn(f64, f64) -> f64 = match kind {
            ElementwiseOp::Add => |x, y| x + y,
            ElementwiseOp::Sub => |x, y| x - y,
            ElementwiseOp::Mul => |x, y| x * y,
            ElementwiseOp::Div => |x, y| x / y,
            _ => unreachable!("unary kind routed to binary"),
        };
        let (shape, data) = match bcast {
            Broadcast::None => (
                va.shape().to_vec(),
                va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::Rhs => {
                let y = vb.item();
                (va.shape().to_vec(), va.data().iter().map(|&x| f(x, y)).collect())
            }
            Broadcast::Lhs => {
                let x = va.item();
                (vb.shape().to_vec(), vb.data().iter().map(|&y| f(x, y)).collect())
            }
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Binary { kind, a, b, bcast },
            needs,
        ))
    }

    fn unary(&mut self, kind: ElementwiseOp, a: Var) -> Result<Var> {
        if kind == ElementwiseOp::Log && self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::domain("log", "non-positive operand"));
        }
        if kind == ElementwiseOp::Exp && self.value(a).data().iter().any(|&x| x > 700.0) {
            return Err(Error::domain("exp", "overflow"));
        }
        Ok(self.unary_unchecked(kind, a))
    }

    fn unary_unchecked(&mut self, kind: ElementwiseOp, a: Var) -> Var {
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            ElementwiseOp::Relu => Box::new(|x: f64| x.max(0.0)),
            ElementwiseOp::Exp => Box::new(f64::exp),
            ElementwiseOp::Log => Box::new(f64::ln),
            ElementwiseOp::Abs => Box::new(f64::abs),
            ElementwiseOp::Scale(c) => Box::new(move |x| x * c),
            _ => unreachable!("binary kind routed to unary"),
        };
        let value = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(value, Op::Unary { kind, a }, needs)
    }

    /// Adds a length-`C` bias to every row of an `R×C` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if va.rank() != 2 || vb.len() != va.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", va.shape(), vb.shape()),
            ));
        }
        let c = va.cols();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(vb.data()).for_each(|(x, &b)| *x += b);
        }
        let shape = va.shape().to_vec();
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow { a, bias }, needs))
    }

    // -- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let out = kernels::matmul(va.data(), vb.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b },
            needs,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::shape("transpose", format!("rank {}", va.rank())));
        }
        let value = va.transpose();
        let needs = self.needs(a);
        Ok(self.push(value, Op::Transpose(a), needs))
    }

    // -- normalisation --------------------------------------------------

    /// Row-wise softmax of a matrix, computed with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::shape("softmax_rows", format!("rank {}", va.rank())));
        }
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(va.cols()) {
            kernels::softmax_in_place(row);
        }
        let shape = va.shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SoftmaxRows(a), needs))
    }

    /// Row-wise log-softmax of a matrix, computed in log space.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::shape("log_softmax_rows", format!("rank {}", va.rank())));
        }
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(va.cols()) {
            kernels::log_softmax_in_place(row);
        }
        let shape = va.shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogSoftmaxRows(a), needs))
    }

    /// Normalizes over the last axis to zero mean and unit variance, then
    /// applies the affine `gain`/`bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, epsilon: f64) -> Result<Var> {
        let (va, vg, vb) = (self.value(a), self.value(gain), self.value(bias));
        let c = *va.shape().last().unwrap_or(&1);
        if vg.len() != c || vb.len() != c {
            return Err(Error::shape(
                "layer_norm",
                format!("input {:?}, gain {:?}, bias {:?}", va.shape(), vg.shape(), vb.shape()),
            ));
        }
        let rows = va.len() / c;
        let mut xhat = vec![0.0; va.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; va.len()];
        for r in 0..rows {
            let x = &va.data()[r * c..(r + 1) * c];
            let mean = x.iter().sum::<f64>() / c as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + epsilon).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (x[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let shape = va.shape().to_vec();
        let needs = self.needs(a) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Divides each row of a matrix by its Euclidean norm. Rows with norm
    /// below `1e-12` are a domain error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::shape("normalize_rows", format!("rank {}", va.rank())));
        }
        let c = va.cols();
        let mut out = va.data().to_vec();
        let mut norms = Vec::with_capacity(va.rows());
        for (r, row) in out.chunks_mut(c).enumerate() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-12 {
                return Err(Error::domain(
                    "normalize_rows",
                    format!("row {r} has norm {n:e}"),
                ));
            }
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let shape = va.shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::NormalizeRows { a, norms },
            needs,
        ))
    }

    // -- reductions -----------------------------------------------------

    /// Reduces along `axis`, or over every element when `axis` is `None`.
    ///
    /// For a matrix, axis 0 collapses rows (one value per column) and axis 1
    /// collapses columns (one value per row). `Max` routes its gradient to
    /// the selected element; `Argmax` returns indices as a constant.
    pub fn reduce(&mut self, kind: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var> {
        let va = self.value(a);
        let (groups, out_shape) = reduction_groups(va.shape(), axis)?;
        let mut out = Vec::with_capacity(groups.len());
        let mut picked = Vec::new();
        for g in &groups {
            let vals = g.iter().map(|&i| va.data()[i]);
            match kind {
                ReduceOp::Sum => out.push(vals.sum()),
                ReduceOp::Mean => out.push(vals.sum::<f64>() / g.len() as f64),
                ReduceOp::Max | ReduceOp::Argmax => {
                    let mut best = 0;
                    for (k, &i) in g.iter().enumerate() {
                        if va.data()[i] > va.data()[g[best]] {
                            best = k;
                        }
                    }
                    if kind == ReduceOp::Max {
                        out.push(va.data()[g[best]]);
                        picked.push(g[best]);
                    } else {
                        out.push(best as f64);
                    }
                }
            }
        }
        let value = Tensor::from_parts(out_shape, out);
        if kind == ReduceOp::Argmax {
            return Ok(self.constant(value));
        }
        let needs = self.needs(a);
        Ok(self.push(
            value,
            Op::Reduce {
                kind,
                a,
                axis,
                picked,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(ReduceOp::Sum, a, None)
            .expect("full reduction is always valid")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(ReduceOp::Mean, a, None)
            .expect("full reduction is always valid")
    }

    // -- indexing and layout --------------------------------------------

    /// Selects rows of a matrix; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("rank {}", va.rank())));
        }
        if rows.is_empty() {
            return Err(Error::invalid("gather_rows: no rows selected"));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= va.rows()) {
            return Err(Error::invalid(format!(
                "gather_rows: row {r} out of range for {} rows",
                va.rows()
            )));
        }
        let value = va.select_rows(rows);
        let needs = self.needs(a);
        Ok(self.push(
            value,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 || len == 0 || start + len > va.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{} of {:?}", start + len, va.shape()),
            ));
        }
        let (r, c) = (va.rows(), va.cols());
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&va.data()[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_parts(vec![r, len], out),
            Op::SliceCols { a, start },
            needs,
        ))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols: no parts"))?;
        let rows = self.value(*first).rows();
        if parts
            .iter()
            .any(|&p| self.value(p).rank() != 2 || self.value(p).rows() != rows)
        {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    /// Concatenates the flattened values of `parts` and views the result
    /// with `shape`. Stacking equal-width matrices this way concatenates
    /// their rows; stacking scalars builds a vector or matrix.
    pub fn stack(&mut self, parts: &[Var], shape: &[usize]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        if shape.iter().product::<usize>() != out.len() || shape.contains(&0) {
            return Err(Error::shape(
                "stack",
                format!("{} values into {shape:?}", out.len()),
            ));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::Stack(parts.to_vec()),
            needs,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    // -- backward -------------------------------------------------------

    /// Propagates d(root)/d(leaf) into the gradient buffer of every leaf
    /// that requires a gradient. Buffers accumulate across calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = Accumulator {
                nodes: &self.nodes,
                adj: &mut adj,
            };
            match &node.op {
                Op::Leaf => {
                    let shape = node.value.shape().to_vec();
                    match &mut self.grads[i] {
                        Some(buf) => buf
                            .data_mut()
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(b, x)| *b += x),
                        slot => *slot = Some(Tensor::from_parts(shape, g)),
                    }
                }
                Op::Binary { kind, a, b, bcast } => {
                    backward_binary(&mut acc, *kind, *a, *b, *bcast, &g)
                }
                Op::Unary { kind, a } => {
                    let x = self.nodes[a.0].value.data();
                    let y = node.value.data();
                    let ga: Vec<f64> = match kind {
                        ElementwiseOp::Relu => g
                            .iter()
                            .zip(x)
                            .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                            .collect(),
                        ElementwiseOp::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                        ElementwiseOp::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                        ElementwiseOp::Abs => g
                            .iter()
                            .zip(x)
                            .map(|(g, &x)| {
                                if x > 0.0 {
                                    *g
                                } else if x < 0.0 {
                                    -*g
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                        ElementwiseOp::Scale(c) => g.iter().map(|g| g * c).collect(),
                        _ => unreachable!(),
                    };
                    acc.add(*a, ga);
                }
                Op::AddRow { a, bias } => {
                    if acc.needs(*bias) {
                        let c = self.nodes[bias.0].value.len();
                        let mut gb = vec![0.0; c];
                        for row in g.chunks(c) {
                            gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                        }
                        acc.add(*bias, gb);
                    }
                    acc.add(*a, g);
                }
                Op::MatMul { a, b } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    if acc.needs(*a) {
                        acc.add(*a, kernels::matmul_nt(&g, vb.data(), m, n, k));
                    }
                    if acc.needs(*b) {
                        acc.add(*b, kernels::matmul_tn(va.data(), &g, m, k, n));
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (node.value.rows(), node.value.cols());
                    acc.add(*a, Tensor::from_parts(vec![r, c], g).transpose().into_data());
                }
                Op::SoftmaxRows(a) => {
                    let s = node.value.data();
                    let c = node.value.cols();
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, sr), out) in g.chunks(c).zip(s.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(sr).map(|(g, s)| g * s).sum();
                        for j in 0..c {
                            out[j] = sr[j] * (gr[j] - dot);
                        }
                    }
                    acc.add(*a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let l = node.value.data();
                    let c = node.value.cols();
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, lr), out) in g.chunks(c).zip(l.chunks(c)).zip(ga.chunks_mut(c)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            out[j] = gr[j] - lr[j].exp() * total;
                        }
                    }
                    acc.add(*a, ga);
                }
                Op::LayerNorm {
                    a,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let vg = self.nodes[gain.0].value.data();
                    let c = vg.len();
                    if acc.needs(*bias) {
                        let mut gb = vec![0.0; c];
                        for row in g.chunks(c) {
                            gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                        }
                        acc.add(*bias, gb);
                    }
                    if acc.needs(*gain) {
                        let mut gg = vec![0.0; c];
                        for (row, h) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                gg[j] += row[j] * h[j];
                            }
                        }
                        acc.add(*gain, gg);
                    }
                    if acc.needs(*a) {
                        let mut ga = vec![0.0; g.len()];
                        for (r, ((row, h), out)) in g
                            .chunks(c)
                            .zip(xhat.chunks(c))
                            .zip(ga.chunks_mut(c))
                            .enumerate()
                        {
                            let mut mean_d = 0.0;
                            let mut mean_dh = 0.0;
                            for j in 0..c {
                                let d = row[j] * vg[j];
                                mean_d += d;
                                mean_dh += d * h[j];
                            }
                            mean_d /= c as f64;
                            mean_dh /= c as f64;
                            for j in 0..c {
                                out[j] = inv_std[r] * (row[j] * vg[j] - mean_d - h[j] * mean_dh);
                            }
                        }
                        acc.add(*a, ga);
                    }
                }
                Op::Reduce {
                    kind,
                    a,
                    axis,
                    picked,
                } => {
                    let va = &self.nodes[a.0].value;
                    let mut ga = vec![0.0; va.len()];
                    if *kind == ReduceOp::Max {
                        for (&i, gi) in picked.iter().zip(&g) {
                            ga[i] += gi;
                        }
                    } else {
                        let (groups, _) = reduction_groups(va.shape(), *axis)?;
                        for (grp, gi) in groups.iter().zip(&g) {
                            let share = if *kind == ReduceOp::Mean {
                                gi / grp.len() as f64
                            } else {
                                *gi
                            };
                            for &i in grp {
                                ga[i] += share;
                            }
                        }
                    }
                    acc.add(*a, ga);
                }
                Op::GatherRows { a, rows } => {
                    let va = &self.nodes[a.0].value;
                    let c = va.cols();
                    let mut ga = vec![0.0; va.len()];
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            ga[r * c + j] += g[k * c + j];
                        }
                    }
                    acc.add(*a, ga);
                }
                Op::SliceCols { a, start } => {
                    let va = &self.nodes[a.0].value;
                    let (r, c) = (va.rows(), va.cols());
                    let len = node.value.cols();
                    let mut ga = vec![0.0; va.len()];
                    for i in 0..r {
                        ga[i * c + start..i * c + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    acc.add(*a, ga);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.nodes[p.0].value.cols();
                        if acc.needs(p) {
                            let mut gp = Vec::with_capacity(rows * c);
                            for i in 0..rows {
                                gp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                            }
                            acc.add(p, gp);
                        }
                        offset += c;
                    }
                }
                Op::Stack(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].value.len();
                        acc.add(p, g[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::NormalizeRows { a, norms } => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let mut ga = vec![0.0; g.len()];
                    for (r, ((gr, yr), out)) in g
                        .chunks(c)
                        .zip(y.chunks(c))
                        .zip(ga.chunks_mut(c))
                        .enumerate()
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for j in 0..c {
                            out[j] = (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                    acc.add(*a, ga);
                }
                Op::Reshape(a) => acc.add(*a, g),
            }
        }
        Ok(())
    }
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    adj: &'a mut [Option<Vec<f64>>],
}

impl Accumulator<'_> {
    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn add(&mut self, v: Var, g: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut self.adj[v.0] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
            slot => *slot = Some(g),
        }
    }
}

fn backward_binary(
    acc: &mut Accumulator<'_>,
    kind: ElementwiseOp,
    a: Var,
    b: Var,
    bcast: Broadcast,
    g: &[f64],
) {
    let xa = acc.nodes[a.0].value.data();
    let xb = acc.nodes[b.0].value.data();
    let n = g.len();
    // Element k of the output reads these operand values.
    let at = |x: &[f64], k: usize| if x.len() == 1 { x[0] } else { x[k] };
    let (da, db): (Vec<f64>, Vec<f64>) = match kind {
        ElementwiseOp::Add => (g.to_vec(), g.to_vec()),
        ElementwiseOp::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
        ElementwiseOp::Mul => (
            (0..n).map(|k| g[k] * at(xb, k)).collect(),
            (0..n).map(|k| g[k] * at(xa, k)).collect(),
        ),
        ElementwiseOp::Div => (
            (0..n).map(|k| g[k] / at(xb, k)).collect(),
            (0..n)
                .map(|k| {
                    let y = at(xb, k);
                    -g[k] * at(xa, k) / (y * y)
                })
                .collect(),
        ),
        _ => unreachable!(),
    };
    let collapse = |d: Vec<f64>| vec![d.iter().sum::<f64>()];
    match bcast {
        Broadcast::None => {
            acc.add(a, da);
            acc.add(b, db);
        }
        Broadcast::Rhs => {
            acc.add(a, da);
            acc.add(b, collapse(db));
        }
        Broadcast::Lhs => {
            acc.add(a, collapse(da));
            acc.add(b, db);
        }
    }
}

/// Flat element indices feeding each output cell of a reduction.
fn reduction_groups(shape: &[usize], axis: Option<usize>) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let len: usize = shape.iter().product();
    match (axis, shape.len()) {
        (None, _) => Ok((vec![(0..len).collect()], Vec::new())),
        (Some(0), 1) => Ok((vec![(0..len).collect()], Vec::new())),
        (Some(0), 2) => {
            let (r, c) = (shape[0], shape[1]);
            Ok(((0..c).map(|j| (0..r).map(|i| i * c + j).collect()).collect(), vec![c]))
        }
        (Some(1), 2) => {
            let (r, c) = (shape[0], shape[1]);
            Ok(((0..r).map(|i| (i * c..(i + 1) * c).collect()).collect(), vec![r]))
        }
        (Some(ax), rank) => Err(Error::invalid(format!(
            "reduce: axis {ax} invalid for rank {rank}"
        ))),
    }
}
