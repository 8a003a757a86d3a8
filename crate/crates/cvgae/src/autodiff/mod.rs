//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The operator set is deliberately small: exactly what the model forward
//! passes need (matmul, elementwise arithmetic, activations, reductions,
//! concat/slice, bias broadcast, and an edge-conditioned neighbor aggregation
//! used by the message passing rounds). Every op records its inputs on the
//! tape so a single backward sweep produces gradients for all parameter
//! leaves. All values are checked finite after every forward op.

mod gradcheck;
mod store;

pub use gradcheck::{grad_check, FnModel, GradCheckModel, GradCheckReport};
pub use store::{glorot_uniform, BoundParams, ParamStore, StoreError};

use serde::{Deserialize, Serialize};
use std::fmt;

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AdError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AdError::Shape(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AdError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Re-checks the shape/data invariant (used after deserialization).
    pub fn validate(&self) -> Result<(), AdError> {
        let numel: usize = self.shape.iter().product();
        if numel != self.data.len() {
            return Err(AdError::Shape(format!(
                "tensor shape {:?} inconsistent with {} stored values",
                self.shape,
                self.data.len()
            )));
        }
        Ok(())
    }
}

/// Errors from tape construction or the backward sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum AdError {
    Shape(String),
    NonFinite(&'static str),
    NotScalarLoss(Vec<usize>),
    NonPositiveVariance,
    BadStepSize(f64),
}

impl fmt::Display for AdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdError::Shape(msg) => write!(f, "shape mismatch: {}", msg),
            AdError::NonFinite(op) => write!(f, "non-finite output from op `{}`", op),
            AdError::NotScalarLoss(shape) => {
                write!(f, "backward requires a scalar loss, got shape {:?}", shape)
            }
            AdError::NonPositiveVariance => {
                write!(f, "reparameterized sample requires strictly positive variance")
            }
            AdError::BadStepSize(h) => {
                write!(f, "finite-difference step {} outside [1e-6, 1e-3]", h)
            }
        }
    }
}

impl std::error::Error for AdError {}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(usize);

enum Op {
    Leaf,
    Matmul(Value, Value),
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Scale(Value, f64),
    AddScalar(Value),
    Sigmoid(Value),
    Tanh(Value),
    Exp(Value),
    Log(Value),
    Sum(Value),
    Mean(Value),
    ConcatCols(Value, Value),
    SliceCols { input: Value, start: usize, end: usize },
    BroadcastAdd(Value, Value),
    EdgeAggregate { edges: Value, nodes: Value, pairs: Vec<(usize, usize)> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    is_param: bool,
}

/// Wengert list. Ops append nodes in topological order; [`Tape::backward`]
/// walks them in reverse. A tape is single-threaded for its lifetime.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`. Leaves with no path to the loss get
    /// an explicit zero tensor of the leaf's shape.
    pub fn get(&self, v: Value) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
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

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, is_param: bool) -> Value {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param,
        });
        Value(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Value, AdError> {
        if !value.is_finite() {
            return Err(AdError::NonFinite(name));
        }
        let needs = match &op {
            Op::Leaf => false,
            Op::Matmul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ConcatCols(a, b)
            | Op::BroadcastAdd(a, b)
            | Op::EdgeAggregate { edges: a, nodes: b, .. } => {
                self.needs_grad(*a) || self.needs_grad(*b)
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SliceCols { input: a, .. } => self.needs_grad(*a),
        };
        Ok(self.push(value, op, needs, false))
    }

    fn needs_grad(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf, false, false)
    }

    /// Insert a parameter leaf (gradient target).
    pub fn parameter(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf, true, true)
    }

    fn dims2(&self, v: Value, op: &'static str) -> Result<(usize, usize), AdError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(AdError::Shape(format!("{}: expected rank-2, got {:?}", op, s)));
        }
        Ok((s[0], s[1]))
    }

    fn check_same_shape(&self, a: Value, b: Value, op: &'static str) -> Result<(), AdError> {
        if self.shape(a) != self.shape(b) {
            return Err(AdError::Shape(format!(
                "{}: {:?} vs {:?}",
                op,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value, AdError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(AdError::Shape(format!(
                "matmul: inner dims {} vs {}",
                k, k2
            )));
        }
        let out = matmul_data(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push_op(t, Op::Matmul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value, AdError> {
        self.check_same_shape(a, b, "add")?;
        let t = zip_data(self.value(a), self.value(b), |x, y| x + y);
        self.push_op(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value, AdError> {
        self.check_same_shape(a, b, "sub")?;
        let t = zip_data(self.value(a), self.value(b), |x, y| x - y);
        self.push_op(t, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value, AdError> {
        self.check_same_shape(a, b, "mul")?;
        let t = zip_data(self.value(a), self.value(b), |x, y| x * y);
        self.push_op(t, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Result<Value, AdError> {
        let t = map_data(self.value(a), |x| c * x);
        self.push_op(t, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Value, c: f64) -> Result<Value, AdError> {
        let t = map_data(self.value(a), |x| x + c);
        self.push_op(t, Op::AddScalar(a), "add_scalar")
    }

    pub fn sigmoid(&mut self, a: Value) -> Result<Value, AdError> {
        let t = map_data(self.value(a), |x| 1.0 / (1.0 + (-x).exp()));
        self.push_op(t, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Value) -> Result<Value, AdError> {
        let t = map_data(self.value(a), |x| x.tanh());
        self.push_op(t, Op::Tanh(a), "tanh")
    }

    pub fn exp(&mut self, a: Value) -> Result<Value, AdError> {
        let t = map_data(self.value(a), |x| x.exp());
        self.push_op(t, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Value) -> Result<Value, AdError> {
        let t = map_data(self.value(a), |x| x.ln());
        self.push_op(t, Op::Log(a), "log")
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Value) -> Result<Value, AdError> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Mean of all entries, as a rank-0 tensor.
    pub fn mean(&mut self, a: Value) -> Result<Value, AdError> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(AdError::Shape("mean of empty tensor".into()));
        }
        let s: f64 = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s / n as f64), Op::Mean(a), "mean")
    }

    /// Concatenate two matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, a: Value, b: Value) -> Result<Value, AdError> {
        let (m, ca) = self.dims2(a, "concat_cols")?;
        let (m2, cb) = self.dims2(b, "concat_cols")?;
        if m != m2 {
            return Err(AdError::Shape(format!(
                "concat_cols: row counts {} vs {}",
                m, m2
            )));
        }
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = Vec::with_capacity(m * (ca + cb));
        for r in 0..m {
            out.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let t = Tensor::new(vec![m, ca + cb], out)?;
        self.push_op(t, Op::ConcatCols(a, b), "concat_cols")
    }

    /// Column range `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, a: Value, start: usize, end: usize) -> Result<Value, AdError> {
        let (m, c) = self.dims2(a, "slice_cols")?;
        if start >= end || end > c {
            return Err(AdError::Shape(format!(
                "slice_cols: range {}..{} out of {} columns",
                start, end, c
            )));
        }
        let d = self.value(a).data();
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&d[r * c + start..r * c + end]);
        }
        let t = Tensor::new(vec![m, w], out)?;
        self.push_op(t, Op::SliceCols { input: a, start, end }, "slice_cols")
    }

    /// Add a length-`n` bias row to every row of an `[m, n]` matrix.
    pub fn broadcast_add(&mut self, a: Value, bias: Value) -> Result<Value, AdError> {
        let (m, n) = self.dims2(a, "broadcast_add")?;
        let bs = self.shape(bias);
        if bs != [n] {
            return Err(AdError::Shape(format!(
                "broadcast_add: bias {:?} against {} columns",
                bs, n
            )));
        }
        let da = self.value(a).data();
        let db = self.value(bias).data();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                out.push(da[r * n + c] + db[c]);
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.push_op(t, Op::BroadcastAdd(a, bias), "broadcast_add")
    }

    /// Edge-conditioned neighbor aggregation over a complete graph.
    ///
    /// `edges` is `[P, d*d]` (one row-major `d x d` matrix per unordered
    /// pair), `nodes` is `[M, d]`, and `pairs[p] = (i, j)` with `i < j`.
    /// Output row `i` is the sum of `E_p . nodes[j]` over all pairs touching
    /// `i`, i.e. both directions of every pair use the same edge matrix.
    pub fn edge_aggregate(
        &mut self,
        edges: Value,
        nodes: Value,
        pairs: &[(usize, usize)],
    ) -> Result<Value, AdError> {
        let (p_rows, dd) = self.dims2(edges, "edge_aggregate")?;
        let (m, d) = self.dims2(nodes, "edge_aggregate")?;
        if dd != d * d {
            return Err(AdError::Shape(format!(
                "edge_aggregate: edge width {} is not {}^2",
                dd, d
            )));
        }
        if p_rows != pairs.len() {
            return Err(AdError::Shape(format!(
                "edge_aggregate: {} edge rows vs {} pairs",
                p_rows,
                pairs.len()
            )));
        }
        if pairs.iter().any(|&(i, j)| i >= m || j >= m || i == j) {
            return Err(AdError::Shape("edge_aggregate: pair index out of range".into()));
        }
        let de = self.value(edges).data();
        let dn = self.value(nodes).data();
        let mut out = vec![0.0; m * d];
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let e = &de[p * d * d..(p + 1) * d * d];
            for r in 0..d {
                let erow = &e[r * d..(r + 1) * d];
                let mut acc_i = 0.0;
                let mut acc_j = 0.0;
                for c in 0..d {
                    acc_i += erow[c] * dn[j * d + c];
                    acc_j += erow[c] * dn[i * d + c];
                }
                out[i * d + r] += acc_i;
                out[j * d + r] += acc_j;
            }
        }
        let t = Tensor::new(vec![m, d], out)?;
        self.push_op(
            t,
            Op::EdgeAggregate { edges, nodes, pairs: pairs.to_vec() },
            "edge_aggregate",
        )
    }

    /// `mean + sqrt(variance) * noise`, differentiable in `mean` and
    /// `variance`; the noise tensor enters as a constant.
    pub fn reparam_sample(
        &mut self,
        mean: Value,
        variance: Value,
        noise: &Tensor,
    ) -> Result<Value, AdError> {
        self.check_same_shape(mean, variance, "reparam_sample")?;
        if self.shape(mean) != noise.shape() {
            return Err(AdError::Shape(format!(
                "reparam_sample: noise {:?} vs mean {:?}",
                noise.shape(),
                self.shape(mean)
            )));
        }
        if self.value(variance).data().iter().any(|&v| v <= 0.0) {
            return Err(AdError::NonPositiveVariance);
        }
        let n = self.constant(noise.clone());
        let log_var = self.log(variance)?;
        let half_log = self.scale(log_var, 0.5)?;
        let std = self.exp(half_log)?;
        let scaled = self.mul(std, n)?;
        self.add(mean, scaled)
    }

    /// Reverse sweep from a scalar loss node. The tape is not consumed;
    /// repeated sweeps give bit-identical results.
    pub fn backward(&self, loss: Value) -> Result<Gradients, AdError> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(AdError::NotScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(loss_shape.to_vec(), vec![1.0])?);

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            if !node.needs_grad && !node.is_param {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    if self.needs_grad(*a) {
                        // dA = dC . B^T
                        let bt = transpose(self.value(*b).data(), k, n);
                        let da = matmul_data(g.data(), &bt, m, n, k);
                        accumulate(&mut grads, a.0, &da, &[m, k]);
                    }
                    if self.needs_grad(*b) {
                        // dB = A^T . dC
                        let at = transpose(self.value(*a).data(), m, k);
                        let db = matmul_data(&at, g.data(), k, m, n);
                        accumulate(&mut grads, b.0, &db, &[k, n]);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs_grad(*a) {
                        accumulate(&mut grads, a.0, g.data(), self.shape(*a));
                    }
                    if self.needs_grad(*b) {
                        accumulate(&mut grads, b.0, g.data(), self.shape(*b));
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs_grad(*a) {
                        accumulate(&mut grads, a.0, g.data(), self.shape(*a));
                    }
                    if self.needs_grad(*b) {
                        let neg: Vec<f64> = g.data().iter().map(|x| -x).collect();
                        accumulate(&mut grads, b.0, &neg, self.shape(*b));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs_grad(*a) {
                        let da: Vec<f64> = g
                            .data()
                            .iter()
                            .zip(self.value(*b).data())
                            .map(|(gx, bx)| gx * bx)
                            .collect();
                        accumulate(&mut grads, a.0, &da, self.shape(*a));
                    }
                    if self.needs_grad(*b) {
                        let db: Vec<f64> = g
                            .data()
                            .iter()
                            .zip(self.value(*a).data())
                            .map(|(gx, ax)| gx * ax)
                            .collect();
                        accumulate(&mut grads, b.0, &db, self.shape(*b));
                    }
                }
                Op::Scale(a, c) => {
                    if self.needs_grad(*a) {
                        let da: Vec<f64> = g.data().iter().map(|x| c * x).collect();
                        accumulate(&mut grads, a.0, &da, self.shape(*a));
                    }
                }
                Op::AddScalar(a) => {
                    if self.needs_grad(*a) {
                        accumulate(&mut grads, a.0, g.data(), self.shape(*a));
                    }
                }
                Op::Sigmoid(a) => {
                    if self.needs_grad(*a) {
                        let y = node.value.data();
                        let da: Vec<f64> = g
                            .data()
                            .iter()
                            .zip(y)
                            .map(|(gx, yx)| gx * yx * (1.0 - yx))
                            .collect();
                        accumulate(&mut grads, a.0, &da, self.shape(*a));
                    }
                }
                Op::Tanh(a) => {
                    if self.needs_grad(*a) {
                        let y = node.value.data();
                        let da: Vec<f64> = g
                            .data()
                            .iter()
                            .zip(y)
                            .map(|(gx, yx)| gx * (1.0 - yx * yx))
                            .collect();
                        accumulate(&mut grads, a.0, &da, self.shape(*a));
                    }
                }
                Op::Exp(a) => {
                    if self.needs_grad(*a) {
                        let y = node.value.data();
                        let da: Vec<f64> = g.data().iter().zip(y).map(|(gx, yx)| gx * yx).collect();
                        accumulate(&mut grads, a.0, &da, self.shape(*a));
                    }
                }
                Op::Log(a) => {
                    if self.needs_grad(*a) {
                        let x = self.value(*a).data();
                        let da: Vec<f64> = g.data().iter().zip(x).map(|(gx, xv)| gx / xv).collect();
                        accumulate(&mut grads, a.0, &da, self.shape(*a));
                    }
                }
                Op::Sum(a) => {
                    if self.needs_grad(*a) {
                        let gv = g.item();
                        let da = vec![gv; self.value(*a).numel()];
                        accumulate(&mut grads, a.0, &da, self.shape(*a));
                    }
                }
                Op::Mean(a) => {
                    if self.needs_grad(*a) {
                        let n = self.value(*a).numel();
                        let gv = g.item() / n as f64;
                        let da = vec![gv; n];
                        accumulate(&mut grads, a.0, &da, self.shape(*a));
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (m, ca) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let cb = self.shape(*b)[1];
                    let w = ca + cb;
                    if self.needs_grad(*a) {
                        let mut da = Vec::with_capacity(m * ca);
                        for r in 0..m {
                            da.extend_from_slice(&g.data()[r * w..r * w + ca]);
                        }
                        accumulate(&mut grads, a.0, &da, &[m, ca]);
                    }
                    if self.needs_grad(*b) {
                        let mut db = Vec::with_capacity(m * cb);
                        for r in 0..m {
                            db.extend_from_slice(&g.data()[r * w + ca..(r + 1) * w]);
                        }
                        accumulate(&mut grads, b.0, &db, &[m, cb]);
                    }
                }
                Op::SliceCols { input, start, end } => {
                    if self.needs_grad(*input) {
                        let (m, c) = (self.shape(*input)[0], self.shape(*input)[1]);
                        let w = end - start;
                        let mut da = vec![0.0; m * c];
                        for r in 0..m {
                            for k in 0..w {
                                da[r * c + start + k] = g.data()[r * w + k];
                            }
                        }
                        accumulate(&mut grads, input.0, &da, &[m, c]);
                    }
                }
                Op::BroadcastAdd(a, bias) => {
                    let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                    if self.needs_grad(*a) {
                        accumulate(&mut grads, a.0, g.data(), &[m, n]);
                    }
                    if self.needs_grad(*bias) {
                        let mut db = vec![0.0; n];
                        for row in g.data().chunks_exact(n) {
                            for (dst, src) in db.iter_mut().zip(row) {
                                *dst += src;
                            }
                        }
                        accumulate(&mut grads, bias.0, &db, &[n]);
                    }
                }
                Op::EdgeAggregate { edges, nodes, pairs } => {
                    let d = self.shape(*nodes)[1];
                    let m = self.shape(*nodes)[0];
                    let p_rows = pairs.len();
                    let ed = self.value(*edges).data();
                    let nd = self.value(*nodes).data();
                    let gd = g.data();
                    if self.needs_grad(*nodes) {
                        let mut dn = vec![0.0; m * d];
                        for (p, &(i, j)) in pairs.iter().enumerate() {
                            let e = &ed[p * d * d..(p + 1) * d * d];
                            // dN[j] += E^T . dOut[i]; dN[i] += E^T . dOut[j]
                            for r in 0..d {
                                let gi = gd[i * d + r];
                                let gj = gd[j * d + r];
                                let erow = &e[r * d..(r + 1) * d];
                                for c in 0..d {
                                    dn[j * d + c] += erow[c] * gi;
                                    dn[i * d + c] += erow[c] * gj;
                                }
                            }
                        }
                        accumulate(&mut grads, nodes.0, &dn, &[m, d]);
                    }
                    if self.needs_grad(*edges) {
                        let mut de_grad = vec![0.0; p_rows * d * d];
                        for (p, &(i, j)) in pairs.iter().enumerate() {
                            let eg = &mut de_grad[p * d * d..(p + 1) * d * d];
                            for r in 0..d {
                                let gi = gd[i * d + r];
                                let gj = gd[j * d + r];
                                for c in 0..d {
                                    eg[r * d + c] += gi * nd[j * d + c] + gj * nd[i * d + c];
                                }
                            }
                        }
                        accumulate(&mut grads, edges.0, &de_grad, &[p_rows, d * d]);
                    }
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, delta: &[f64], shape: &[usize]) {
    match &mut grads[id] {
        Some(t) => {
            for (dst, src) in t.data_mut().iter_mut().zip(delta) {
                *dst += src;
            }
        }
        None => {
            grads[id] = Some(Tensor {
                shape: shape.to_vec(),
                data: delta.to_vec(),
            });
        }
    }
}

fn matmul_data(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn map_data(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&x| f(x)).collect(),
    }
}

fn zip_data(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}
