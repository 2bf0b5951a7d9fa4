//! Tape-based reverse-mode differentiation over small dense tensors.
//!
//! A [`Tape`] records every primitive applied during a forward pass.
//! [`Tape::backward`] then walks the record in reverse from a scalar loss
//! node and returns the gradient restricted to a named parameter subset.
//! Nodes that cannot reach a selected parameter are skipped entirely, so
//! asking for last-layer gradients never touches the earlier layers.
//!
//! Only the primitives the reconstruction models need are provided. There
//! is no broadcasting except [`Tape::add_bias`], which adds a vector to
//! every row of a matrix.

use crate::error::{invalid, Error, Result};
use crate::scalar::{dot, Scalar};

/// Dense row-major tensor. A scalar has an empty shape and one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(invalid(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("ragged matrix rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self {
            shape: vec![n, n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.as_matrix("transpose")?;
        let mut data = Vec::with_capacity(r * c);
        for j in 0..c {
            data.extend((0..r).map(|i| self.data[i * c + j]));
        }
        Ok(Self {
            shape: vec![c, r],
            data,
        })
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddBias(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Tanh(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SliceColumns(usize, usize, usize),
    SliceRows(usize, usize, usize),
    ConcatRows(Vec<usize>),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SliceColumns(a, ..)
            | Op::SliceRows(a, ..) => vec![*a],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SliceColumns(..) => "slice_columns",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatRows(..) => "concat_rows",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of primitive applications. Node ids are indices into the
/// record, so every input of a node precedes it.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, usize)>,
}

/// Named parameter subset a gradient is taken with respect to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSubset {
    pub id: String,
    pub names: Vec<String>,
}

impl ParamSubset {
    pub fn new(id: impl Into<String>, names: Vec<String>) -> Self {
        Self { id: id.into(), names }
    }
}

/// Flat gradient over a parameter subset, concatenated in subset order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector<T> {
    pub values: Vec<T>,
    pub selector_id: String,
}

impl<T: Scalar> GradientVector<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.selector_id != other.selector_id {
            return Err(Error::SelectorMismatch {
                left: self.selector_id.clone(),
                right: other.selector_id.clone(),
            });
        }
        if self.values.len() != other.values.len() {
            return Err(Error::Shape {
                op: "gradient dot",
                left: vec![self.values.len()],
                right: vec![other.values.len()],
            });
        }
        Ok(dot(&self.values, &other.values))
    }

    pub fn sq_norm(&self) -> T {
        dot(&self.values, &self.values)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a named, differentiable leaf.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<NodeId> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(invalid(format!("parameter `{name}` registered twice")));
        }
        let id = self.leaf(value);
        self.params.push((name.to_string(), id.0));
        Ok(id)
    }

    /// Records a constant leaf (inputs, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value)
    }

    fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<NodeId> {
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op.name()));
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::Shape {
            op,
            left: self.value(a).shape.clone(),
            right: self.value(b).shape.clone(),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (av.as_matrix("matmul"), bv.as_matrix("matmul")) {
            (Ok(x), Ok(y)) => (x, y),
            _ => return Err(self.shape_err("matmul", a, b)),
        };
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let data = matmul_raw(&av.data, &bv.data, m, k, n);
        self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::MatMul(a.0, b.0),
        )
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(self.shape_err(op_name, a, b));
        }
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape.clone();
        self.push(Tensor { shape, data }, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn subtract(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("subtract", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        let (m, n) = av
            .as_matrix("add_bias")
            .map_err(|_| self.shape_err("add_bias", a, bias))?;
        if bv.shape != [n] {
            return Err(self.shape_err("add_bias", a, bias));
        }
        let mut data = av.data.clone();
        for row in data.chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(&bv.data) {
                *x = *x + b;
            }
        }
        self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::AddBias(a.0, bias.0),
        )
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> Result<NodeId> {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(value, op)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        self.unary(a, |x| x * s, Op::Scale(a.0, s))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, T::tanh, Op::Tanh(a.0))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data.iter().copied().fold(T::zero(), |acc, x| acc + x);
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.data.is_empty() {
            return Err(invalid("mean of empty tensor"));
        }
        let s = av.data.iter().copied().fold(T::zero(), |acc, x| acc + x);
        let m = s / T::from_usize_lossy(av.data.len());
        self.push(Tensor::scalar(m), Op::Mean(a.0))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_columns(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let av = self.value(a);
        let (m, n) = av.as_matrix("slice_columns")?;
        if start >= end || end > n {
            return Err(invalid(format!("column range {start}..{end} invalid for {n} columns")));
        }
        let mut data = Vec::with_capacity(m * (end - start));
        for row in av.data.chunks(n) {
            data.extend_from_slice(&row[start..end]);
        }
        self.push(
            Tensor {
                shape: vec![m, end - start],
                data,
            },
            Op::SliceColumns(a.0, start, end),
        )
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let av = self.value(a);
        let (m, n) = av.as_matrix("slice_rows")?;
        if start >= end || end > m {
            return Err(invalid(format!("row range {start}..{end} invalid for {m} rows")));
        }
        let data = av.data[start * n..end * n].to_vec();
        self.push(
            Tensor {
                shape: vec![end - start, n],
                data,
            },
            Op::SliceRows(a.0, start, end),
        )
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| invalid("concat_rows of nothing"))?;
        let (_, n) = self.value(first).as_matrix("concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            match pv.as_matrix("concat_rows") {
                Ok((r, c)) if c == n => {
                    rows += r;
                    data.extend_from_slice(&pv.data);
                }
                _ => return Err(self.shape_err("concat_rows", first, p)),
            }
        }
        self.push(
            Tensor {
                shape: vec![rows, n],
                data,
            },
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
        )
    }

    /// Resolves subset names to recorded parameter leaves.
    fn subset_nodes(&self, subset: &ParamSubset) -> Result<Vec<usize>> {
        subset
            .names
            .iter()
            .map(|name| {
                self.params
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|&(_, id)| id)
                    .ok_or_else(|| Error::UnknownParameter(name.clone()))
            })
            .collect()
    }

    /// Gradient of the scalar `loss` with respect to the subset's parameters.
    pub fn backward(&self, loss: NodeId, subset: &ParamSubset) -> Result<GradientVector<T>> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape.clone()));
        }
        let targets = self.subset_nodes(subset)?;

        let mut needed = vec![false; loss.0 + 1];
        for &t in &targets {
            if t <= loss.0 {
                needed[t] = true;
            }
        }
        for i in 0..=loss.0 {
            if !needed[i] {
                needed[i] = self.nodes[i].op.inputs().iter().any(|&j| needed[j]);
            }
        }

        let mut adjoint: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adjoint[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !needed[i] {
                continue;
            }
            let Some(upstream) = adjoint[i].take() else {
                continue;
            };
            self.propagate(i, &upstream, &needed, &mut adjoint);
            adjoint[i] = Some(upstream);
        }

        let mut values = Vec::new();
        for &t in &targets {
            match adjoint.get(t).and_then(Option::as_ref) {
                Some(g) => values.extend_from_slice(g),
                None => values.extend(std::iter::repeat_n(T::zero(), self.nodes[t].value.len())),
            }
        }
        Ok(GradientVector {
            values,
            selector_id: subset.id.clone(),
        })
    }

    fn propagate(&self, i: usize, up: &[T], needed: &[bool], adjoint: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut accumulate = |j: usize, contribution: Vec<T>| {
            if !needed[j] {
                return;
            }
            match &mut adjoint[j] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(contribution) {
                        *a = *a + c;
                    }
                }
                slot => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                if needed[*a] {
                    accumulate(*a, matmul_a_bt(up, &bv.data, m, n, k));
                }
                if needed[*b] {
                    accumulate(*b, matmul_at_b(&av.data, up, m, k, n));
                }
            }
            Op::Add(a, b) => {
                accumulate(*a, up.to_vec());
                accumulate(*b, up.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(*a, up.to_vec());
                accumulate(*b, up.iter().map(|&u| -u).collect());
            }
            Op::AddBias(a, b) => {
                accumulate(*a, up.to_vec());
                if needed[*b] {
                    let n = self.nodes[*b].value.len();
                    let mut col = vec![T::zero(); n];
                    for row in up.chunks(n) {
                        for (c, &u) in col.iter_mut().zip(row) {
                            *c = *c + u;
                        }
                    }
                    accumulate(*b, col);
                }
            }
            Op::Scale(a, s) => accumulate(*a, up.iter().map(|&u| u * *s).collect()),
            Op::Relu(a) => {
                let x = &self.nodes[*a].value.data;
                accumulate(
                    *a,
                    up.iter()
                        .zip(x)
                        .map(|(&u, &x)| if x > T::zero() { u } else { T::zero() })
                        .collect(),
                );
            }
            Op::Tanh(a) => {
                let y = &node.value.data;
                accumulate(*a, up.iter().zip(y).map(|(&u, &y)| u * (T::one() - y * y)).collect());
            }
            Op::Square(a) => {
                let x = &self.nodes[*a].value.data;
                let two = T::lit(2.0);
                accumulate(*a, up.iter().zip(x).map(|(&u, &x)| two * x * u).collect());
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.len();
                accumulate(*a, vec![up[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len();
                accumulate(*a, vec![up[0] / T::from_usize_lossy(n); n]);
            }
            Op::SliceColumns(a, start, end) => {
                let av = &self.nodes[*a].value;
                let (m, n) = (av.shape[0], av.shape[1]);
                let w = end - start;
                let mut g = vec![T::zero(); m * n];
                for r in 0..m {
                    g[r * n + start..r * n + end].copy_from_slice(&up[r * w..(r + 1) * w]);
                }
                accumulate(*a, g);
            }
            Op::SliceRows(a, start, end) => {
                let av = &self.nodes[*a].value;
                let n = av.shape[1];
                let mut g = vec![T::zero(); av.len()];
                g[start * n..end * n].copy_from_slice(up);
                accumulate(*a, g);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    accumulate(p, up[offset..offset + len].to_vec());
                    offset += len;
                }
            }
        }
    }
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + aip * bv;
            }
        }
    }
    out
}

/// `up (m×n) · Bᵀ` where `B` is `k×n`.
fn matmul_a_bt<T: Scalar>(up: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let urow = &up[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(urow, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `Aᵀ · up` where `A` is `m×k` and `up` is `m×n`.
fn matmul_at_b<T: Scalar>(a: &[T], up: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let urow = &up[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            for (o, &u) in out[p * n..(p + 1) * n].iter_mut().zip(urow) {
                *o = *o + aip * u;
            }
        }
    }
    out
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some((_, slot)) => *slot = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Element count of the subset's parameters.
    pub fn subset_len(&self, subset: &ParamSubset) -> Result<usize> {
        subset
            .names
            .iter()
            .map(|n| {
                self.get(n)
                    .map(Tensor::len)
                    .ok_or_else(|| Error::UnknownParameter(n.clone()))
            })
            .sum()
    }

    /// Registers every parameter on `tape`, returning node ids in order.
    pub fn register(&self, tape: &mut Tape<T>) -> Result<Vec<NodeId>> {
        self.entries
            .iter()
            .map(|(name, value)| tape.param(name, value.clone()))
            .collect()
    }
}

/// Central-difference gradient of `loss_fn` over the subset's coordinates.
///
/// Independent of the tape: each coordinate is perturbed by `±h` and the
/// loss re-evaluated from scratch.
pub fn finite_difference_gradient<T, F>(
    loss_fn: F,
    params: &Params<T>,
    subset: &ParamSubset,
    h: T,
) -> Result<GradientVector<T>>
where
    T: Scalar,
    F: Fn(&Params<T>) -> Result<T>,
{
    if h <= T::zero() {
        return Err(invalid("finite-difference step must be positive"));
    }
    let mut work = params.clone();
    let mut values = Vec::with_capacity(params.subset_len(subset)?);
    let two_h = h + h;
    for name in &subset.names {
        let len = params.get(name).map(Tensor::len).unwrap_or(0);
        for k in 0..len {
            let original = params.get(name).map(|t| t.data[k]).unwrap_or_else(T::zero);
            set_coord(&mut work, name, k, original + h);
            let plus = loss_fn(&work)?;
            set_coord(&mut work, name, k, original - h);
            let minus = loss_fn(&work)?;
            set_coord(&mut work, name, k, original);
            values.push((plus - minus) / two_h);
        }
    }
    Ok(GradientVector {
        values,
        selector_id: subset.id.clone(),
    })
}

fn set_coord<T: Scalar>(params: &mut Params<T>, name: &str, k: usize, v: T) {
    if let Some(t) = params.get_mut(name) {
        t.data[k] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn subset(names: &[&str]) -> ParamSubset {
        ParamSubset::new("test", names.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn matmul_forward() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn relu_and_sum_of_squares() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let v = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let sq = tape.square(v).unwrap();
        let s = tape.sum(sq).unwrap();
        assert_eq!(tape.value(s).item(), 25.0);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
        let c = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(tape.add(a, c).unwrap_err().to_string().contains("[3, 2]"));
    }

    #[test]
    fn product_rule_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", Tensor::matrix(1, 1, vec![2.0]).unwrap()).unwrap();
        let x = tape.constant(Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let l = tape.matmul(w, x).unwrap();
        let g = tape.backward(l, &subset(&["w"])).unwrap();
        assert_eq!(g.values, vec![3.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", Tensor::vector(vec![3.0, 4.0])).unwrap();
        let sq = tape.square(w).unwrap();
        let l = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(l, &subset(&["w"])).unwrap().values, vec![6.0, 8.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", Tensor::vector(vec![3.0, 4.0])).unwrap();
        let sq = tape.square(w).unwrap();
        assert!(matches!(
            tape.backward(sq, &subset(&["w"])),
            Err(Error::NonScalarLoss(_))
        ));
        let l = tape.sum(sq).unwrap();
        assert!(matches!(
            tape.backward(l, &subset(&["nope"])),
            Err(Error::UnknownParameter(_))
        ));
        assert!(tape.param("w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn unreached_parameter_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let _u = tape.param("u", Tensor::vector(vec![5.0])).unwrap();
        let l = tape.sum(w).unwrap();
        assert_eq!(
            tape.backward(l, &subset(&["u", "w"])).unwrap().values,
            vec![0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn finite_difference_examples() {
        let mut params = Params::new();
        params.insert("w", Tensor::scalar(3.0));
        let sq = |p: &Params<f64>| Ok(p.get("w").unwrap().item().powi(2));
        let g = finite_difference_gradient(sq, &params, &subset(&["w"]), 1e-5).unwrap();
        assert!((g.values[0] - 6.0).abs() < 1e-6);

        let constant = |_: &Params<f64>| Ok(1.5);
        let g = finite_difference_gradient(constant, &params, &subset(&["w"]), 1e-5).unwrap();
        assert_eq!(g.values, vec![0.0]);
    }

    /// Two-layer perceptron built from every primitive, for gradient checks.
    fn mlp_loss_on(tape: &mut Tape<f64>, ids: &[NodeId], x: &Tensor<f64>, y: &Tensor<f64>) -> NodeId {
        let (w1, b1, w2, b2) = (ids[0], ids[1], ids[2], ids[3]);
        let x = tape.constant(x.clone());
        let y = tape.constant(y.clone());
        let h = tape.matmul(x, w1).unwrap();
        let h = tape.add_bias(h, b1).unwrap();
        let left = tape.slice_columns(h, 0, 2).unwrap();
        let right = tape.slice_columns(h, 2, 4).unwrap();
        let left = tape.tanh(left).unwrap();
        let right = tape.relu(right).unwrap();
        let top = tape.slice_rows(left, 0, 2).unwrap();
        let bottom = tape.slice_rows(left, 2, 3).unwrap();
        let left = tape.concat_rows(&[top, bottom]).unwrap();
        let mixed = tape.add(left, right).unwrap();
        let out = tape.matmul(mixed, w2).unwrap();
        let out = tape.add_bias(out, b2).unwrap();
        let out = tape.scale(out, 0.7).unwrap();
        let diff = tape.subtract(out, y).unwrap();
        let sq = tape.square(diff).unwrap();
        let s = tape.sum(sq).unwrap();
        let m = tape.mean(sq).unwrap();
        tape.add(s, m).unwrap()
    }

    fn mlp_loss(tape: &mut Tape<f64>, params: &Params<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> NodeId {
        let ids = params.register(tape).unwrap();
        mlp_loss_on(tape, &ids, x, y)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_mlp(seed: u64) -> (Params<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        p.insert("w1", random_tensor(&mut rng, vec![3, 4]));
        p.insert("b1", random_tensor(&mut rng, vec![4]));
        p.insert("w2", random_tensor(&mut rng, vec![2, 2]));
        p.insert("b2", random_tensor(&mut rng, vec![2]));
        let x = random_tensor(&mut rng, vec![3, 3]);
        let y = random_tensor(&mut rng, vec![3, 2]);
        (p, x, y)
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = a.iter().chain(b).map(|x| x.abs()).fold(1e-12, f64::max);
        diff / scale
    }

    #[test]
    fn backward_matches_finite_differences() {
        let all = subset(&["w1", "b1", "w2", "b2"]);
        for seed in 0..100 {
            let (params, x, y) = random_mlp(seed);
            let mut tape = Tape::new();
            let loss = mlp_loss(&mut tape, &params, &x, &y);
            let analytic = tape.backward(loss, &all).unwrap();
            let fd = finite_difference_gradient(
                |p| {
                    let mut t = Tape::new();
                    let l = mlp_loss(&mut t, p, &x, &y);
                    Ok(t.value(l).item())
                },
                &params,
                &all,
                1e-5,
            )
            .unwrap();
            let err = max_rel_err(&analytic.values, &fd.values);
            assert!(err <= 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let all = subset(&["w1", "b1", "w2", "b2"]);
        let (params, x, y) = random_mlp(7);
        let (_, x2, y2) = random_mlp(8);
        let mut tape = Tape::new();
        let l1 = mlp_loss(&mut tape, &params, &x, &y);
        let g1 = tape.backward(l1, &all).unwrap();
        let mut tape2 = Tape::new();
        let l2 = mlp_loss(&mut tape2, &params, &x2, &y2);
        let g2 = tape2.backward(l2, &all).unwrap();

        let mut tape3 = Tape::new();
        let ids = params.register(&mut tape3).unwrap();
        let l1 = mlp_loss_on(&mut tape3, &ids, &x, &y);
        let l2 = mlp_loss_on(&mut tape3, &ids, &x2, &y2);
        let (a, b) = (1.5, -0.25);
        let s1 = tape3.scale(l1, a).unwrap();
        let s2 = tape3.scale(l2, b).unwrap();
        let combo = tape3.add(s1, s2).unwrap();
        let g = tape3.backward(combo, &all).unwrap();
        for k in 0..g.len() {
            let expected = a * g1.values[k] + b * g2.values[k];
            assert!((g.values[k] - expected).abs() <= 1e-12, "coord {k}");
        }
    }

    #[test]
    fn deterministic_gradients() {
        let all = subset(&["w1", "b1", "w2", "b2"]);
        let (params, x, y) = random_mlp(3);
        let run = || {
            let mut tape = Tape::new();
            let l = mlp_loss(&mut tape, &params, &x, &y);
            tape.backward(l, &all).unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::vector(vec![f64::MAX]));
        let sq = tape.square(a);
        assert!(sq.is_err());
    }

    #[test]
    fn gradient_dot_checks_selector() {
        let a = GradientVector {
            values: vec![1.0, 2.0],
            selector_id: "a".into(),
        };
        let b = GradientVector {
            values: vec![1.0, 2.0],
            selector_id: "b".into(),
        };
        assert!(matches!(a.dot(&b), Err(Error::SelectorMismatch { .. })));
        assert_eq!(a.dot(&a).unwrap(), 5.0);
        assert_eq!(a.sq_norm(), 5.0);
    }
}
