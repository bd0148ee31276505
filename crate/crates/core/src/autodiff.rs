//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation in creation order, so inputs always
//! precede their consumers and a backward pass is a single reverse sweep.
//! Parameters can enter a graph by reference ([`Graph::input_ref`]) which
//! keeps per-step graph construction cheap inside ascent loops.
//!
//! Broadcasting is limited to a single-element operand combined with an
//! arbitrary tensor. Everything else must agree in shape exactly.

use std::borrow::Cow;

use crate::error::{Error, Result};

/// Dense row-major array with shape metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self { data, shape })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            data: vec![value],
            shape: vec![1],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            data: vec![0.0; n],
            shape: shape.to_vec(),
        }
    }

    /// A `[1, n]` row vector.
    pub fn row(values: &[f64]) -> Self {
        Self {
            data: values.to_vec(),
            shape: vec![1, values.len()],
        }
    }

    /// Stacks equal-length rows into an `[n, d]` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Empty("from_rows"));
        }
        let d = rows[0].len();
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(data, vec![n, d])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row `i` of a 2-D tensor.
    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidTensor(format!(
            "shape {shape:?} must have positive extents"
        )));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::InvalidTensor(format!(
            "shape {shape:?} holds {n} elements but data has {len}"
        )));
    }
    Ok(())
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Neg,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Exp,
    Log,
    Square,
    Softplus,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Tanh => x.tanh(),
            Unary::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Softplus => {
                if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::Softplus => sigmoid(x),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }
}

/// Operation kinds accepted by [`Graph::forward_op`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Matmul,
    Affine,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Exp,
    Log,
    Neg,
    Softplus,
    Square,
    Sum,
    Mean,
    SumRows,
    Concat,
    Slice { start: usize, end: usize },
    MaskSelect(Vec<bool>),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary {
        kind: Binary,
        lhs: Var,
        rhs: Var,
    },
    Unary {
        kind: Unary,
        input: Var,
    },
    Matmul {
        lhs: Var,
        rhs: Var,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Concat(Vec<Var>),
    SelectCols {
        input: Var,
        cols: Vec<usize>,
    },
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    requires_grad: bool,
}

/// Computation graph confined to one thread. Parameters borrowed with
/// lifetime `'a` may be referenced without copying.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Cow<'a, [f64]>, shape: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            shape,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, Cow::Owned(t.data), t.shape, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, Cow::Owned(t.data), t.shape, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf backed by borrowed storage.
    pub fn input_ref(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.push(
            Op::Leaf,
            Cow::Borrowed(&t.data),
            t.shape.clone(),
            requires_grad,
        )
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            data: self.nodes[v.0].value.to_vec(),
            shape: self.nodes[v.0].shape.clone(),
        }
    }

    /// First element of a node's value.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Generic entry point dispatching to the typed op constructors.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize, op: &'static str| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::Domain {
                    op,
                    detail: format!("expects {n} inputs, got {}", inputs.len()),
                });
            }
            Ok(())
        };
        match kind {
            OpKind::Add => {
                arity(2, "add")?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                arity(2, "sub")?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2, "mul")?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Div => {
                arity(2, "div")?;
                self.div(inputs[0], inputs[1])
            }
            OpKind::Matmul => {
                arity(2, "matmul")?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Affine => {
                arity(3, "affine")?;
                self.affine(inputs[0], inputs[1], inputs[2])
            }
            OpKind::Tanh => {
                arity(1, "tanh")?;
                self.unary(Unary::Tanh, inputs[0])
            }
            OpKind::Relu => {
                arity(1, "relu")?;
                self.unary(Unary::Relu, inputs[0])
            }
            OpKind::LeakyRelu(s) => {
                arity(1, "leaky_relu")?;
                self.unary(Unary::LeakyRelu(s), inputs[0])
            }
            OpKind::Sigmoid => {
                arity(1, "sigmoid")?;
                self.unary(Unary::Sigmoid, inputs[0])
            }
            OpKind::Exp => {
                arity(1, "exp")?;
                self.unary(Unary::Exp, inputs[0])
            }
            OpKind::Log => {
                arity(1, "log")?;
                self.unary(Unary::Log, inputs[0])
            }
            OpKind::Neg => {
                arity(1, "neg")?;
                self.unary(Unary::Neg, inputs[0])
            }
            OpKind::Softplus => {
                arity(1, "softplus")?;
                self.unary(Unary::Softplus, inputs[0])
            }
            OpKind::Square => {
                arity(1, "square")?;
                self.unary(Unary::Square, inputs[0])
            }
            OpKind::Sum => {
                arity(1, "sum")?;
                Ok(self.sum(inputs[0]))
            }
            OpKind::Mean => {
                arity(1, "mean")?;
                Ok(self.mean(inputs[0]))
            }
            OpKind::SumRows => {
                arity(1, "sum_rows")?;
                self.sum_rows(inputs[0])
            }
            OpKind::Concat => self.concat(inputs),
            OpKind::Slice { start, end } => {
                arity(1, "slice")?;
                self.slice_cols(inputs[0], start, end)
            }
            OpKind::MaskSelect(mask) => {
                arity(1, "mask_select")?;
                self.mask_select(inputs[0], &mask)
            }
        }
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(Unary::LeakyRelu(slope), a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let c = self.scalar(factor);
        self.mul(a, c)
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let (la, lb) = (na.value.len(), nb.value.len());
        let shape = if na.shape == nb.shape || lb == 1 {
            na.shape.clone()
        } else if la == 1 {
            nb.shape.clone()
        } else {
            return Err(Error::Shape {
                op: kind.name(),
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        };
        let n = la.max(lb);
        let (va, vb) = (&na.value, &nb.value);
        let at = |i: usize| if la == 1 { va[0] } else { va[i] };
        let bt = |i: usize| if lb == 1 { vb[0] } else { vb[i] };
        if kind == Binary::Div {
            if let Some(i) = (0..lb).find(|&i| vb[i] == 0.0) {
                return Err(Error::Domain {
                    op: "div",
                    detail: format!("division by zero at element {i}"),
                });
            }
        }
        let out: Vec<f64> = match kind {
            Binary::Add => (0..n).map(|i| at(i) + bt(i)).collect(),
            Binary::Sub => (0..n).map(|i| at(i) - bt(i)).collect(),
            Binary::Mul => (0..n).map(|i| at(i) * bt(i)).collect(),
            Binary::Div => (0..n).map(|i| at(i) / bt(i)).collect(),
        };
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(
            Op::Binary {
                kind,
                lhs: a,
                rhs: b,
            },
            Cow::Owned(out),
            shape,
            rg,
        ))
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let node = &self.nodes[a.0];
        if kind == Unary::Log {
            if let Some((i, v)) = node.value.iter().enumerate().find(|(_, &v)| v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive operand {v} at element {i}"),
                });
            }
        }
        let out: Vec<f64> = node.value.iter().map(|&x| kind.apply(x)).collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        Ok(self.push(Op::Unary { kind, input: a }, Cow::Owned(out), shape, rg))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::Domain {
                op,
                detail: format!("expects a 2-D operand, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            false,
            &self.nodes[b.0].value,
            false,
            &mut out,
            false,
        );
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(
            Op::Matmul { lhs: a, rhs: b },
            Cow::Owned(out),
            vec![m, n],
            rg,
        ))
    }

    /// `input · weight + bias`, with `bias` of `m` elements added to every row.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims("affine", input)?;
        let (k2, m) = self.matrix_dims("affine", weight)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "affine",
                lhs: self.nodes[input.0].shape.clone(),
                rhs: self.nodes[weight.0].shape.clone(),
            });
        }
        let bvals = &self.nodes[bias.0].value;
        if bvals.len() != m {
            return Err(Error::Shape {
                op: "affine",
                lhs: self.nodes[weight.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bvals);
        }
        gemm(
            n,
            k,
            m,
            &self.nodes[input.0].value,
            false,
            &self.nodes[weight.0].value,
            false,
            &mut out,
            true,
        );
        let rg = self.nodes[input.0].requires_grad
            || self.nodes[weight.0].requires_grad
            || self.nodes[bias.0].requires_grad;
        Ok(self.push(
            Op::Affine {
                input,
                weight,
                bias,
            },
            Cow::Owned(out),
            vec![n, m],
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Sum(a), Cow::Owned(vec![s]), vec![1], rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Mean(a), Cow::Owned(vec![s]), vec![1], rg)
    }

    /// Sums each row of an `[n, d]` matrix into an `[n, 1]` column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims("sum_rows", a)?;
        let v = &self.nodes[a.0].value;
        let out: Vec<f64> = (0..n).map(|i| v[i * d..(i + 1) * d].iter().sum()).collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::SumRows(a), Cow::Owned(out), vec![n, 1], rg))
    }

    /// Concatenates `[n, c_i]` matrices along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat"));
        }
        let (n, _) = self.matrix_dims("concat", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat", p)?;
            if r != n {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(
            Op::Concat(parts.to_vec()),
            Cow::Owned(out),
            vec![n, total],
            rg,
        ))
    }

    /// Columns `start..end` of an `[n, d]` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (_, d) = self.matrix_dims("slice", a)?;
        if start >= end || end > d {
            return Err(Error::Domain {
                op: "slice",
                detail: format!("range {start}..{end} invalid for {d} columns"),
            });
        }
        self.select_cols(a, (start..end).collect())
    }

    /// Columns of an `[n, d]` matrix where `mask` is true.
    pub fn mask_select(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (_, d) = self.matrix_dims("mask_select", a)?;
        if mask.len() != d {
            return Err(Error::Shape {
                op: "mask_select",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let cols: Vec<usize> = (0..d).filter(|&j| mask[j]).collect();
        if cols.is_empty() {
            return Err(Error::Domain {
                op: "mask_select",
                detail: "mask selects no columns".into(),
            });
        }
        self.select_cols(a, cols)
    }

    fn select_cols(&mut self, a: Var, cols: Vec<usize>) -> Result<Var> {
        let (n, d) = self.matrix_dims("select", a)?;
        let v = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(n * cols.len());
        for i in 0..n {
            out.extend(cols.iter().map(|&j| v[i * d + j]));
        }
        let k = cols.len();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            Op::SelectCols { input: a, cols },
            Cow::Owned(out),
            vec![n, k],
            rg,
        ))
    }

    /// Reverse sweep from a single-element `root`. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`]; intermediate gradients are
    /// recomputed on every call.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rnode = &self.nodes[root.0];
        if rnode.value.len() != 1 {
            return Err(Error::NonScalarRoot(rnode.shape.clone()));
        }
        if !rnode.requires_grad {
            return Ok(());
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        accumulate(&mut self.grads[root.0], &[1.0]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream);
            self.grads[idx] = Some(upstream);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, up: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Binary { kind, lhs, rhs } => {
                let la = self.nodes[lhs.0].value.len();
                let lb = self.nodes[rhs.0].value.len();
                let n = up.len();
                let va = &self.nodes[lhs.0].value;
                let vb = &self.nodes[rhs.0].value;
                let at = |i: usize| if la == 1 { va[0] } else { va[i] };
                let bt = |i: usize| if lb == 1 { vb[0] } else { vb[i] };
                let (ga, gb): (Option<Vec<f64>>, Option<Vec<f64>>) = {
                    let da = |i: usize| match kind {
                        Binary::Add | Binary::Sub => up[i],
                        Binary::Mul => up[i] * bt(i),
                        Binary::Div => up[i] / bt(i),
                    };
                    let db = |i: usize| match kind {
                        Binary::Add => up[i],
                        Binary::Sub => -up[i],
                        Binary::Mul => up[i] * at(i),
                        Binary::Div => -up[i] * at(i) / (bt(i) * bt(i)),
                    };
                    let ga = self.wants(lhs).then(|| reduce_to(la, n, da));
                    let gb = self.wants(rhs).then(|| reduce_to(lb, n, db));
                    (ga, gb)
                };
                if let Some(g) = ga {
                    accumulate(&mut self.grads[lhs.0], &g);
                }
                if let Some(g) = gb {
                    accumulate(&mut self.grads[rhs.0], &g);
                }
            }
            Op::Unary { kind, input } => {
                let x = &self.nodes[input.0].value;
                let y = &self.nodes[idx].value;
                let g: Vec<f64> = up
                    .iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(&u, (&xi, &yi))| u * kind.derivative(xi, yi))
                    .collect();
                accumulate(&mut self.grads[input.0], &g);
            }
            Op::Matmul { lhs, rhs } => {
                let (m, k) = (self.nodes[lhs.0].shape[0], self.nodes[lhs.0].shape[1]);
                let n = self.nodes[rhs.0].shape[1];
                if self.wants(lhs) {
                    let mut g = vec![0.0; m * k];
                    gemm(m, n, k, up, false, &self.nodes[rhs.0].value, true, &mut g, false);
                    accumulate(&mut self.grads[lhs.0], &g);
                }
                if self.wants(rhs) {
                    let mut g = vec![0.0; k * n];
                    gemm(k, m, n, &self.nodes[lhs.0].value, true, up, false, &mut g, false);
                    accumulate(&mut self.grads[rhs.0], &g);
                }
            }
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let (n, k) = (self.nodes[input.0].shape[0], self.nodes[input.0].shape[1]);
                let m = self.nodes[weight.0].shape[1];
                if self.wants(input) {
                    let mut g = vec![0.0; n * k];
                    gemm(n, m, k, up, false, &self.nodes[weight.0].value, true, &mut g, false);
                    accumulate(&mut self.grads[input.0], &g);
                }
                if self.wants(weight) {
                    let mut g = vec![0.0; k * m];
                    gemm(k, n, m, &self.nodes[input.0].value, true, up, false, &mut g, false);
                    accumulate(&mut self.grads[weight.0], &g);
                }
                if self.wants(bias) {
                    let mut g = vec![0.0; m];
                    for row in up.chunks_exact(m) {
                        for (gj, &u) in g.iter_mut().zip(row) {
                            *gj += u;
                        }
                    }
                    accumulate(&mut self.grads[bias.0], &g);
                }
            }
            Op::Sum(a) => {
                let g = vec![up[0]; self.nodes[a.0].value.len()];
                accumulate(&mut self.grads[a.0], &g);
            }
            Op::Mean(a) => {
                let len = self.nodes[a.0].value.len();
                let g = vec![up[0] / len as f64; len];
                accumulate(&mut self.grads[a.0], &g);
            }
            Op::SumRows(a) => {
                let d = self.nodes[a.0].shape[1];
                let g: Vec<f64> = up.iter().flat_map(|&u| std::iter::repeat_n(u, d)).collect();
                accumulate(&mut self.grads[a.0], &g);
            }
            Op::Concat(parts) => {
                let total = self.nodes[idx].shape[1];
                let rows = self.nodes[idx].shape[0];
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if self.wants(p) {
                        let mut g = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            g.extend_from_slice(&up[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(&mut self.grads[p.0], &g);
                    }
                    offset += w;
                }
            }
            Op::SelectCols { input, cols } => {
                let (rows, d) = (self.nodes[input.0].shape[0], self.nodes[input.0].shape[1]);
                let k = cols.len();
                let mut g = vec![0.0; rows * d];
                for i in 0..rows {
                    for (c, &j) in cols.iter().enumerate() {
                        g[i * d + j] += up[i * k + c];
                    }
                }
                accumulate(&mut self.grads[input.0], &g);
            }
        }
    }
}

fn reduce_to(len: usize, n: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    if len == n {
        (0..n).map(f).collect()
    } else {
        vec![(0..n).map(f).sum()]
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

/// `c (+)= op(a) · op(b)` for row-major operands, where `op` optionally
/// transposes. Logical shapes: `op(a)` is `m×k`, `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe `a`, `b` and `c` exactly for the
    // asserted lengths, and `c` does not alias the inputs.
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

/// Jacobian of `f` at `point` as a row-major `m × n` matrix, one reverse
/// pass per output component.
pub fn jacobian<'a, F>(f: F, point: &[f64]) -> Result<Vec<Vec<f64>>>
where
    F: FnOnce(&mut Graph<'a>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.variable(Tensor::row(point));
    let y = f(&mut g, x)?;
    let m = g.value(y).len();
    if !g.requires_grad(y) {
        return Ok(vec![vec![0.0; point.len()]; m]);
    }
    let flat = g.shape(y).to_vec();
    let y2 = if flat.len() == 2 {
        y
    } else {
        // promote to a row so columns can be selected
        let t = Tensor::new(vec![0.0; m], vec![1, m])?;
        let zero = g.constant(t);
        g.add(zero, y)?
    };
    let mut rows = Vec::with_capacity(m);
    let cols = g.shape(y2)[1];
    for i in 0..m {
        let mut mask = vec![false; cols];
        mask[i % cols] = true;
        let comp = g.mask_select(y2, &mask)?;
        let root = g.sum(comp);
        g.zero_grad();
        g.backward(root)?;
        rows.push(
            g.grad(x)
                .map(|gr| gr.to_vec())
                .unwrap_or_else(|| vec![0.0; point.len()]),
        );
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn matmul_by_hand() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1., 2., 3., 4.], vec![2, 2]).unwrap());
        let b = g.constant(Tensor::new(vec![1., 1.], vec![2, 1]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[3.0, 7.0]);
        assert_eq!(g.shape(c), &[2, 1]);
    }

    #[test]
    fn sigmoid_and_leaky_relu_definitions() {
        let mut g = Graph::new();
        let z = g.scalar(0.0);
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.item(s), 0.5);
        let m = g.scalar(-2.0);
        let l = g.leaky_relu(m, 0.01).unwrap();
        assert!(close(g.item(l), -0.02, 1e-15));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
        let err = g.matmul(a, a).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn log_and_div_reject_bad_operands() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(&[1.0, 0.0]));
        assert!(matches!(g.log(a), Err(Error::Domain { op: "log", .. })));
        let one = g.scalar(1.0);
        assert!(matches!(g.div(one, a), Err(Error::Domain { op: "div", .. })));
        let neg = g.scalar(-3.0);
        assert!(g.log(neg).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let v = g.variable(Tensor::row(&[1.0, 2.0]));
        let sq = g.square(v).unwrap();
        let r = g.sum(sq);
        g.backward(r).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_weight() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::new(vec![0.0, 0.0, 0.0], vec![3, 1]).unwrap());
        let x = g.constant(Tensor::row(&[1.0, -2.0, 3.0]));
        let wx = g.matmul(x, w).unwrap();
        let s = g.sigmoid(wx).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.25, -0.5, 0.75]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let v = g.variable(Tensor::row(&[1.0, 2.0]));
        let sq = g.square(v).unwrap();
        assert!(matches!(g.backward(sq), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn repeated_backward_accumulates_on_leaves() {
        let mut g = Graph::new();
        let v = g.variable(Tensor::row(&[3.0]));
        let sq = g.square(v).unwrap();
        let r = g.sum(sq);
        g.backward(r).unwrap();
        g.backward(r).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[12.0]);
        g.zero_grad();
        g.backward(r).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[6.0]);
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let mut g = Graph::new();
        let v = g.variable(Tensor::row(&[1.0, 2.0, 3.0]));
        let c = g.variable(Tensor::scalar(2.0));
        let p = g.mul(v, c).unwrap();
        let r = g.sum(p);
        g.backward(r).unwrap();
        assert_eq!(g.grad(c).unwrap(), &[6.0]);
        assert_eq!(g.grad(v).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_slice_and_mask_select_route_gradients() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::new(vec![1., 2., 3., 4.], vec![2, 2]).unwrap());
        let b = g.variable(Tensor::new(vec![5., 6.], vec![2, 1]).unwrap());
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c), &[1., 2., 5., 3., 4., 6.]);
        let s = g.slice_cols(c, 1, 3).unwrap();
        assert_eq!(g.value(s), &[2., 5., 4., 6.]);
        let m = g.mask_select(c, &[true, false, true]).unwrap();
        assert_eq!(g.value(m), &[1., 5., 3., 6.]);
        let ss = g.sum(s);
        let sm = g.sum(m);
        let r = g.add(ss, sm).unwrap();
        g.backward(r).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1., 1., 1., 1.]);
        assert_eq!(g.grad(b).unwrap(), &[2., 2.]);
    }

    #[test]
    fn jacobian_of_identity_and_linear_map() {
        let j = jacobian(|_, x| Ok(x), &[0.3, -1.0, 2.0]).unwrap();
        for (i, row) in j.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == k { 1.0 } else { 0.0 });
            }
        }
        let a = Tensor::new(vec![2.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let j = jacobian(
            |g, x| {
                let w = g.constant(a.clone());
                g.matmul(x, w)
            },
            &[0.5, 0.7],
        )
        .unwrap();
        assert_eq!(j, vec![vec![2.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![1.0; 5], vec![2, 3]).is_err());
        assert!(Tensor::new(vec![], vec![0]).is_err());
        assert!(Tensor::new(vec![1.0; 6], vec![2, 3]).is_ok());
    }
}
