//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Trainable tensors live in a [`ParamStore`] and are addressed by
//! [`ParamId`]. A [`Graph`] is built per forward pass: parameters enter it as
//! leaves (one leaf per parameter, however often it is referenced), every
//! operation appends a node, and [`Graph::backward`] walks the nodes in exact
//! reverse insertion order.
//!
//! Two views that hold the same `ParamId` share storage, which is how the
//! IS-ATT/CS-ATT parameter sharing is expressed.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Tensor,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }
}

/// Owner of every trainable tensor of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique within a store.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        if !value.is_finite() {
            return Err(Error::Input(format!("parameter {name:?} has non-finite entries")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    /// Mutable access to a parameter value; the shape cannot change.
    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params[id.0].value.data_mut()
    }

    /// Replaces a value with a tensor of the same shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// `grad += g` for every parameter present in `grads`.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in &grads.by_param {
            self.params[id.0].grad.add_assign(g)?;
        }
        Ok(())
    }

    /// Plain SGD on the accumulated gradients: `value -= lr * grad`.
    pub fn sgd_step(&mut self, lr: f64) {
        if lr == 0.0 {
            return;
        }
        for p in &mut self.params {
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= lr * g;
            }
        }
    }
}

/// Gradients keyed by parameter, in id order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.by_param.insert(id, grad);
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn merge(&mut self, other: &Gradients) -> Result<()> {
        for (id, g) in &other.by_param {
            match self.by_param.get_mut(id) {
                Some(acc) => acc.add_assign(g)?,
                None => {
                    self.by_param.insert(*id, g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.by_param.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Node handle on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation tape.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Smallest `|input|` seen by any ReLU on the tape: the distance to the
    /// nearest kink, where finite differences stop being meaningful.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => self.value(a).data().iter().map(|v| v.abs()).reduce(f64::min),
                _ => None,
            })
            .reduce(f64::min)
    }

    /// Which ReLU inputs are positive, in tape order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.value(a).data().iter().map(|&v| v > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient flows to a parameter from it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value)
    }

    /// Leaf for a parameter. Repeated calls with the same id return the
    /// same node, so shared parameters receive one summed gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let v = self.push(Op::Param(id), store.value(id).clone());
        self.param_leaves.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    /// `a (m×n) + bias (1×n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).require_matrix("add_row")?;
        let b = self.value(bias);
        if b.shape() != [1, n] {
            return Err(Error::dim("add_row", &[m, n], b.shape()));
        }
        let mut out = self.value(a).clone();
        let bias_row = b.data().to_vec();
        for i in 0..m {
            for (o, bv) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&bias_row) {
                *o += bv;
            }
        }
        Ok(self.push(Op::AddRow(a, bias), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).softmax_rows()?;
        Ok(self.push(Op::SoftmaxRows(a), value))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(Op::ConcatCols(a, b), value))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, len)?;
        Ok(self.push(Op::SliceCols(a, start), value))
    }

    /// Embedding lookup: rows of `table` in the order given.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(table).gather_rows(indices)?;
        Ok(self.push(Op::GatherRows(table, indices.to_vec()), value))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mean_rows()?;
        Ok(self.push(Op::MeanRows(a), value))
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.value(logits).require_matrix("cross_entropy")?;
        if targets.len() != m || m == 0 {
            return Err(Error::dim("cross_entropy", &[m, n], &[targets.len()]));
        }
        let l = self.value(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::Input(format!("target {t} out of range for {n} classes")));
            }
            let row = l.row(i);
            total += crate::tensor::log_sum_exp(row) - row[t];
        }
        let value = Tensor::scalar(total / m as f64);
        Ok(self.push(Op::CrossEntropy(logits, targets.to_vec()), value))
    }

    /// Gradients of a scalar `loss` with respect to every parameter leaf.
    pub fn backward_grads(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.backward_nodes(loss)?;
        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &nodes[i]) {
                out.insert(*id, g.clone());
            }
        }
        Ok(out)
    }

    /// Backpropagates `loss` and accumulates (`+=`) into the store's grads.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward_grads(loss)?;
        store.accumulate(&grads)
    }

    /// Gradient of `loss` with respect to any node of the tape.
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Result<Tensor> {
        let nodes = self.backward_nodes(loss)?;
        Ok(nodes[wrt.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.value(wrt).shape())))
    }

    fn backward_nodes(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let shape = self.value(loss).shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(shape, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(upstream) = grads[i].clone() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let da = upstream.matmul(&self.value(*b).transpose()?)?;
                    let db = self.value(*a).transpose()?.matmul(&upstream)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, upstream.transpose()?)?,
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, upstream.clone())?;
                    accumulate(&mut grads, *b, upstream.clone())?;
                }
                Op::AddRow(a, bias) => {
                    let (m, n) = upstream.require_matrix("add_row")?;
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for (d, u) in db.iter_mut().zip(upstream.row(r)) {
                            *d += u;
                        }
                    }
                    accumulate(&mut grads, *bias, Tensor::matrix(1, n, db)?)?;
                    accumulate(&mut grads, *a, upstream.clone())?;
                }
                Op::Mul(a, b) => {
                    let da = upstream.zip_map(self.value(*b), "mul", |u, y| u * y)?;
                    let db = upstream.zip_map(self.value(*a), "mul", |u, x| u * x)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, upstream.scale(*s))?,
                Op::Relu(a) => {
                    let da = upstream.zip_map(self.value(*a), "relu", |u, x| if x > 0.0 { u } else { 0.0 })?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (m, n) = y.require_matrix("softmax_rows")?;
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        let yr = y.row(r);
                        let ur = upstream.row(r);
                        let dot: f64 = yr.iter().zip(ur).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            da[r * n + c] = yr[c] * (ur[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(m, n, da)?)?;
                }
                Op::ConcatCols(a, b) => {
                    let p = self.value(*a).cols();
                    let q = self.value(*b).cols();
                    accumulate(&mut grads, *a, upstream.slice_cols(0, p)?)?;
                    accumulate(&mut grads, *b, upstream.slice_cols(p, q)?)?;
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = self.value(*a).require_matrix("slice_cols")?;
                    let len = upstream.cols();
                    let mut da = Tensor::zeros(&[m, n]);
                    for r in 0..m {
                        for c in 0..len {
                            da.set(r, start + c, upstream.get(r, c));
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::GatherRows(table, indices) => {
                    let mut dt = Tensor::zeros(self.value(*table).shape());
                    let n = dt.cols();
                    for (r, &idx) in indices.iter().enumerate() {
                        let src = upstream.row(r);
                        for (d, s) in dt.data_mut()[idx * n..(idx + 1) * n].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *table, dt)?;
                }
                Op::MeanRows(a) => {
                    let (m, n) = self.value(*a).require_matrix("mean_rows")?;
                    let inv = 1.0 / m as f64;
                    let mut da = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        da.extend(upstream.data().iter().map(|u| u * inv));
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(m, n, da)?)?;
                }
                Op::Sum(a) => {
                    let u = upstream.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(self.value(*a).shape(), u))?;
                }
                Op::CrossEntropy(logits, targets) => {
                    let u = upstream.data()[0];
                    let l = self.value(*logits);
                    let (m, n) = l.require_matrix("cross_entropy")?;
                    let mut dl = l.softmax_rows()?;
                    let inv = u / m as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        dl.set(r, t, dl.get(r, t) - 1.0);
                        for c in 0..n {
                            dl.set(r, c, dl.get(r, c) * inv);
                        }
                    }
                    accumulate(&mut grads, *logits, dl)?;
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
