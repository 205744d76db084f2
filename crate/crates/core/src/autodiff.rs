//! Tape-based reverse-mode differentiation over a closed primitive set.
//!
//! Values are dense [`Tensor`]s. Every forward computation appends a node to
//! the [`Tape`]; [`Tape::backward`] walks the nodes in reverse and
//! accumulates vector-Jacobian products. The primitive set is exactly what
//! the perceptron, the message-passing network and the losses need.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{matmul, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("unregistered primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("{prim} expects {expected} inputs, got {got}")]
    Arity { prim: &'static str, expected: &'static str, got: usize },
    #[error("{prim}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { prim: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("value {0} is not on this tape")]
    UnknownValue(usize),
    #[error("backward requires a 1x1 output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("class label {label} out of range for {classes} logits")]
    LabelOutOfRange { label: usize, classes: usize },
}

/// The registered primitives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// `a + b`, equal shapes.
    Add,
    /// Elementwise `a ⊙ b`, equal shapes.
    Mul,
    /// `a · s` with `s` a 1×1 value.
    Scale,
    /// `A B`.
    MatMul,
    /// `W x + b`, with `b` an `m×1` column broadcast over the columns of `x`.
    Affine,
    /// Row-wise `sqrt(Σ_j a_ij² + eps²)`, giving a column.
    RowNorm { eps: f64 },
    /// Stacks the rows of all inputs (equal column counts).
    Concat,
    /// Row `i` of `V` scaled by `g_i`: inputs `(g, V)`.
    GateRows,
    Relu,
    Sigmoid,
    Identity,
    /// Elementwise arithmetic mean of one or more equal-shape inputs.
    Mean,
    /// Sum of all entries, giving 1×1.
    Sum,
    /// `(x - mean) / (std + eps)` over all entries.
    Standardize { eps: f64 },
    /// `V / sqrt(mean_i |v_i|² + eps)`.
    RmsRows { eps: f64 },
    /// `mean((a - b)²)`, giving 1×1.
    Mse,
    /// `logsumexp(z) - z_label`, giving 1×1.
    CrossEntropy { label: usize },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::MatMul => "matmul",
            Primitive::Affine => "affine",
            Primitive::RowNorm { .. } => "row_norm",
            Primitive::Concat => "concat",
            Primitive::GateRows => "gate_rows",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Identity => "identity",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::Standardize { .. } => "standardize",
            Primitive::RmsRows { .. } => "rms_rows",
            Primitive::Mse => "mse",
            Primitive::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses a primitive id. Parameterized primitives take their parameter
/// after a colon (`row_norm:1e-8`, `cross_entropy:2`); `row_norm`,
/// `standardize` and `rms_rows` default to an eps of 1e-8.
impl FromStr for Primitive {
    type Err = AutodiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let unknown = || AutodiffError::UnknownPrimitive(s.to_string());
        let eps = || -> Result<f64, AutodiffError> {
            match arg {
                None => Ok(1e-8),
                Some(a) => a.parse::<f64>().ok().filter(|e| *e > 0.0).ok_or_else(unknown),
            }
        };
        let plain = |p: Primitive| if arg.is_none() { Ok(p) } else { Err(unknown()) };
        match head {
            "add" => plain(Primitive::Add),
            "mul" => plain(Primitive::Mul),
            "scale" => plain(Primitive::Scale),
            "matmul" => plain(Primitive::MatMul),
            "affine" => plain(Primitive::Affine),
            "concat" => plain(Primitive::Concat),
            "gate_rows" => plain(Primitive::GateRows),
            "relu" => plain(Primitive::Relu),
            "sigmoid" => plain(Primitive::Sigmoid),
            "identity" => plain(Primitive::Identity),
            "mean" => plain(Primitive::Mean),
            "sum" => plain(Primitive::Sum),
            "mse" => plain(Primitive::Mse),
            "row_norm" => Ok(Primitive::RowNorm { eps: eps()? }),
            "standardize" => Ok(Primitive::Standardize { eps: eps()? }),
            "rms_rows" => Ok(Primitive::RmsRows { eps: eps()? }),
            "cross_entropy" => {
                let label = arg.and_then(|a| a.parse::<usize>().ok()).ok_or_else(unknown)?;
                Ok(Primitive::CrossEntropy { label })
            }
            _ => Err(unknown()),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Apply(Primitive, Vec<ValueId>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A recorded computation. Nodes are appended in evaluation order, so the
/// node list is always topologically sorted.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Registers a differentiable leaf (a parameter or a differentiable input).
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Leaf, value, true)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Const, value, false)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Branch taken by every relu on the tape, `true` where its input is
    /// positive. Two evaluations of one computation share a pattern unless
    /// some relu crossed its kink in between.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Apply(Primitive::Relu, ins) => Some(ins[0]),
                _ => None,
            })
            .flat_map(|id| self.nodes[id.0].value.data().iter().map(|&x| x > 0.0))
            .collect()
    }

    /// Number of recorded primitive applications (leaves and constants excluded).
    pub fn op_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Apply(..))).count()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> ValueId {
        self.nodes.push(Node { op, value, requires_grad });
        ValueId(self.nodes.len() - 1)
    }

    /// Applies `prim` to `inputs`, appending the result to the tape.
    pub fn record(&mut self, prim: Primitive, inputs: &[ValueId]) -> Result<ValueId, AutodiffError> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(AutodiffError::UnknownValue(id.0));
            }
        }
        let args: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = eval(prim, &args)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(Op::Apply(prim, inputs.to_vec()), value, requires_grad))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AutodiffError> {
        self.record(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AutodiffError> {
        self.record(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: ValueId, s: ValueId) -> Result<ValueId, AutodiffError> {
        self.record(Primitive::Scale, &[a, s])
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AutodiffError> {
        self.record(Primitive::MatMul, &[a, b])
    }

    pub fn affine(&mut self, w: ValueId, x: ValueId, b: ValueId) -> Result<ValueId, AutodiffError> {
        self.record(Primitive::Affine, &[w, x, b])
    }

    pub fn row_norm(&mut self, v: ValueId, eps: f64) -> Result<ValueId, AutodiffError> {
        self.record(Primitive::RowNorm { eps }, &[v])
    }

    pub fn concat(&mut self, parts: &[ValueId]) -> Result<ValueId, AutodiffError> {
        self.record(Primitive::Concat, parts)
    }

    pub fn gate_rows(&mut self, g: ValueId, v: ValueId) -> Result<ValueId, AutodiffError> {
        self.record(Primitive::GateRows, &[g, v])
    }

    pub fn relu(&mut self, a: ValueId) -> Result<ValueId, AutodiffError> {
        self.record(Primitive::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: ValueId) -> Result<ValueId, AutodiffError> {
        self.record(Primitive::Sigmoid, &[a])
    }

    pub fn mean(&mut self, parts: &[ValueId]) -> Result<ValueId, AutodiffError> {
        self.record(Primitive::Mean, parts)
    }

    pub fn sum(&mut self, a: ValueId) -> Result<ValueId, AutodiffError> {
        self.record(Primitive::Sum, &[a])
    }

    pub fn mse(&mut self, pred: ValueId, target: ValueId) -> Result<ValueId, AutodiffError> {
        self.record(Primitive::Mse, &[pred, target])
    }

    /// Re-evaluates every recorded primitive from the stored leaves and
    /// constants and returns the recomputed values in node order.
    pub fn replay(&self) -> Result<Vec<Tensor>, AutodiffError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf | Op::Const => node.value.clone(),
                Op::Apply(prim, inputs) => {
                    let args: Vec<&Tensor> = inputs.iter().map(|id| &values[id.0]).collect();
                    eval(*prim, &args)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// True when [`Tape::replay`] reproduces every recorded value bit for bit.
    pub fn replays_exactly(&self) -> bool {
        match self.replay() {
            Ok(values) => values.iter().zip(&self.nodes).all(|(v, n)| {
                v.shape() == n.value.shape() && v.data().iter().zip(n.value.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            }),
            Err(_) => false,
        }
    }

    /// Reverse accumulation from a 1×1 `output` seeded with 1.
    pub fn backward(&self, output: ValueId) -> Result<Gradients, AutodiffError> {
        self.backward_seeded(output, 1.0)
    }

    /// Reverse accumulation from a 1×1 `output` seeded with `seed`.
    pub fn backward_seeded(&self, output: ValueId, seed: f64) -> Result<Gradients, AutodiffError> {
        if output.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownValue(output.0));
        }
        let (rows, cols) = self.nodes[output.0].value.shape();
        if (rows, cols) != (1, 1) {
            return Err(AutodiffError::NonScalarOutput { rows, cols });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::scalar(seed));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Op::Apply(prim, inputs) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.vjp(*prim, inputs, &node.value, &g, &mut adj);
            adj[idx] = Some(g);
        }
        let shapes = self.nodes[..=output.0].iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { adjoints: adj, shapes })
    }

    fn wants(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn vjp(&self, prim: Primitive, inputs: &[ValueId], out: &Tensor, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let val = |id: ValueId| &self.nodes[id.0].value;
        match prim {
            Primitive::Add => {
                for &id in inputs {
                    if self.wants(id) {
                        slot(adj, id, g.shape()).add_assign(g);
                    }
                }
            }
            Primitive::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.wants(a) {
                    let s = slot(adj, a, g.shape());
                    for ((o, gi), bi) in s.data_mut().iter_mut().zip(g.data()).zip(val(b).data()) {
                        *o += gi * bi;
                    }
                }
                if self.wants(b) {
                    let s = slot(adj, b, g.shape());
                    for ((o, gi), ai) in s.data_mut().iter_mut().zip(g.data()).zip(val(a).data()) {
                        *o += gi * ai;
                    }
                }
            }
            Primitive::Scale => {
                let (a, s) = (inputs[0], inputs[1]);
                let factor = val(s).data()[0];
                if self.wants(a) {
                    let sl = slot(adj, a, g.shape());
                    for (o, gi) in sl.data_mut().iter_mut().zip(g.data()) {
                        *o += gi * factor;
                    }
                }
                if self.wants(s) {
                    let dot: f64 = g.data().iter().zip(val(a).data()).map(|(x, y)| x * y).sum();
                    slot(adj, s, (1, 1)).data_mut()[0] += dot;
                }
            }
            Primitive::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.wants(a) {
                    let shape = val(a).shape();
                    matmul_nt_acc(slot(adj, a, shape), g, val(b));
                }
                if self.wants(b) {
                    let shape = val(b).shape();
                    matmul_tn_acc(slot(adj, b, shape), val(a), g);
                }
            }
            Primitive::Affine => {
                let (w, x, b) = (inputs[0], inputs[1], inputs[2]);
                if self.wants(w) {
                    let shape = val(w).shape();
                    matmul_nt_acc(slot(adj, w, shape), g, val(x));
                }
                if self.wants(x) {
                    let shape = val(x).shape();
                    matmul_tn_acc(slot(adj, x, shape), val(w), g);
                }
                if self.wants(b) {
                    let sl = slot(adj, b, (g.rows(), 1));
                    for r in 0..g.rows() {
                        sl.data_mut()[r] += g.row(r).iter().sum::<f64>();
                    }
                }
            }
            Primitive::RowNorm { .. } => {
                let v = inputs[0];
                if self.wants(v) {
                    let x = val(v);
                    let sl = slot(adj, v, x.shape());
                    for r in 0..x.rows() {
                        let coef = g.data()[r] / out.data()[r];
                        for (o, xi) in sl.row_mut(r).iter_mut().zip(x.row(r)) {
                            *o += coef * xi;
                        }
                    }
                }
            }
            Primitive::Concat => {
                let mut offset = 0;
                let cols = g.cols();
                for &id in inputs {
                    let shape = val(id).shape();
                    let n = shape.0 * cols;
                    if self.wants(id) {
                        let sl = slot(adj, id, shape);
                        for (o, gi) in sl.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *o += gi;
                        }
                    }
                    offset += n;
                }
            }
            Primitive::GateRows => {
                let (gate, v) = (inputs[0], inputs[1]);
                let (gv, vv) = (val(gate), val(v));
                if self.wants(gate) {
                    let sl = slot(adj, gate, gv.shape());
                    for r in 0..vv.rows() {
                        sl.data_mut()[r] += g.row(r).iter().zip(vv.row(r)).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if self.wants(v) {
                    let sl = slot(adj, v, vv.shape());
                    for r in 0..vv.rows() {
                        let gr = gv.data()[r];
                        for (o, gi) in sl.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o += gi * gr;
                        }
                    }
                }
            }
            Primitive::Relu => {
                let a = inputs[0];
                if self.wants(a) {
                    let x = val(a);
                    let sl = slot(adj, a, x.shape());
                    for ((o, gi), xi) in sl.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Primitive::Sigmoid => {
                let a = inputs[0];
                if self.wants(a) {
                    let sl = slot(adj, a, out.shape());
                    for ((o, gi), y) in sl.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *o += gi * y * (1.0 - y);
                    }
                }
            }
            Primitive::Identity => {
                let a = inputs[0];
                if self.wants(a) {
                    slot(adj, a, g.shape()).add_assign(g);
                }
            }
            Primitive::Mean => {
                let k = inputs.len() as f64;
                for &id in inputs {
                    if self.wants(id) {
                        let sl = slot(adj, id, g.shape());
                        for (o, gi) in sl.data_mut().iter_mut().zip(g.data()) {
                            *o += gi / k;
                        }
                    }
                }
            }
            Primitive::Sum => {
                let a = inputs[0];
                if self.wants(a) {
                    let g0 = g.data()[0];
                    let sl = slot(adj, a, val(a).shape());
                    for o in sl.data_mut() {
                        *o += g0;
                    }
                }
            }
            Primitive::Standardize { eps } => {
                let a = inputs[0];
                if self.wants(a) {
                    let x = val(a);
                    let n = x.len() as f64;
                    let mean = x.data().iter().sum::<f64>() / n;
                    let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let std = libm::sqrt(var);
                    let d = std + eps;
                    let gmean = g.data().iter().sum::<f64>() / n;
                    let gdot: f64 = g.data().iter().zip(x.data()).map(|(gi, xi)| gi * (xi - mean)).sum();
                    let coupling = if std > 0.0 { gdot / (n * std * d * d) } else { 0.0 };
                    let sl = slot(adj, a, x.shape());
                    for ((o, gi), xi) in sl.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *o += (gi - gmean) / d - (xi - mean) * coupling;
                    }
                }
            }
            Primitive::RmsRows { eps } => {
                let a = inputs[0];
                if self.wants(a) && val(a).rows() > 0 {
                    let x = val(a);
                    let rows = x.rows() as f64;
                    let q = x.data().iter().map(|v| v * v).sum::<f64>() / rows;
                    let r = libm::sqrt(q + eps);
                    let gdot: f64 = g.data().iter().zip(x.data()).map(|(gi, xi)| gi * xi).sum();
                    let coupling = gdot / (rows * r * r * r);
                    let sl = slot(adj, a, x.shape());
                    for ((o, gi), xi) in sl.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *o += gi / r - xi * coupling;
                    }
                }
            }
            Primitive::Mse => {
                let (p, t) = (inputs[0], inputs[1]);
                let (pv, tv) = (val(p), val(t));
                let coef = 2.0 * g.data()[0] / pv.len() as f64;
                if self.wants(p) {
                    let sl = slot(adj, p, pv.shape());
                    for ((o, a), b) in sl.data_mut().iter_mut().zip(pv.data()).zip(tv.data()) {
                        *o += coef * (a - b);
                    }
                }
                if self.wants(t) {
                    let sl = slot(adj, t, tv.shape());
                    for ((o, a), b) in sl.data_mut().iter_mut().zip(pv.data()).zip(tv.data()) {
                        *o -= coef * (a - b);
                    }
                }
            }
            Primitive::CrossEntropy { label } => {
                let z = inputs[0];
                if self.wants(z) {
                    let zv = val(z);
                    let probs = softmax(zv.data());
                    let g0 = g.data()[0];
                    let sl = slot(adj, z, zv.shape());
                    for (k, (o, p)) in sl.data_mut().iter_mut().zip(&probs).enumerate() {
                        let target = if k == label { 1.0 } else { 0.0 };
                        *o += g0 * (p - target);
                    }
                }
            }
        }
    }
}

fn slot(adj: &mut [Option<Tensor>], id: ValueId, shape: (usize, usize)) -> &mut Tensor {
    adj[id.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

/// Adjoints of every value up to the differentiated output.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// `∂output/∂value`; zeros when the output does not depend on `id`.
    pub fn wrt(&self, id: ValueId) -> Tensor {
        match self.adjoints.get(id.0) {
            Some(Some(t)) => t.clone(),
            _ => {
                let (r, c) = self.shapes.get(id.0).copied().unwrap_or((0, 0));
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }
}

/// Per-parameter gradient accumulators, shape-congruent with a parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Grad {
    pub tensors: Vec<Tensor>,
}

impl Grad {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Self { tensors: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect() }
    }

    /// Adds the adjoints of `bindings[i]` into accumulator `i`.
    pub fn accumulate(&mut self, grads: &Gradients, bindings: &[Option<ValueId>]) {
        for (acc, id) in self.tensors.iter_mut().zip(bindings) {
            if let Some(t) = id.and_then(|id| grads.get(id)) {
                acc.add_assign(t);
            }
        }
    }

    pub fn add(&mut self, other: &Grad) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.scale(factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + libm::log(z.iter().map(|v| libm::exp(v - max)).sum::<f64>())
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| libm::exp(v - lse)).collect()
}

fn arity(prim: Primitive, got: usize) -> Result<(), AutodiffError> {
    let (ok, expected) = match prim {
        Primitive::Add | Primitive::Mul | Primitive::Scale | Primitive::MatMul | Primitive::GateRows | Primitive::Mse => {
            (got == 2, "2")
        }
        Primitive::Affine => (got == 3, "3"),
        Primitive::Concat | Primitive::Mean => (got >= 1, "at least 1"),
        _ => (got == 1, "1"),
    };
    if ok {
        Ok(())
    } else {
        Err(AutodiffError::Arity { prim: prim.name(), expected, got })
    }
}

fn eval(prim: Primitive, args: &[&Tensor]) -> Result<Tensor, AutodiffError> {
    arity(prim, args.len())?;
    let shape_err = |a: &Tensor, b: &Tensor| AutodiffError::Shape { prim: prim.name(), lhs: a.shape(), rhs: b.shape() };
    let map = |a: &Tensor, f: &dyn Fn(f64) -> f64| Tensor::from_vec(a.rows(), a.cols(), a.data().iter().map(|&x| f(x)).collect());
    Ok(match prim {
        Primitive::Add | Primitive::Mul => {
            let (a, b) = (args[0], args[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(a, b));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| if prim == Primitive::Add { x + y } else { x * y })
                .collect();
            Tensor::from_vec(a.rows(), a.cols(), data)
        }
        Primitive::Scale => {
            let (a, s) = (args[0], args[1]);
            if s.shape() != (1, 1) {
                return Err(shape_err(a, s));
            }
            let f = s.data()[0];
            map(a, &|x| x * f)
        }
        Primitive::MatMul => {
            let (a, b) = (args[0], args[1]);
            if a.cols() != b.rows() {
                return Err(shape_err(a, b));
            }
            matmul(a, b)
        }
        Primitive::Affine => {
            let (w, x, b) = (args[0], args[1], args[2]);
            if w.cols() != x.rows() {
                return Err(shape_err(w, x));
            }
            if b.shape() != (w.rows(), 1) {
                return Err(shape_err(w, b));
            }
            let mut y = matmul(w, x);
            for r in 0..y.rows() {
                let br = b.data()[r];
                for v in y.row_mut(r) {
                    *v += br;
                }
            }
            y
        }
        Primitive::RowNorm { eps } => {
            let a = args[0];
            let data = (0..a.rows())
                .map(|r| libm::sqrt(a.row(r).iter().map(|x| x * x).sum::<f64>() + eps * eps))
                .collect();
            Tensor::column(data)
        }
        Primitive::Concat => {
            let cols = args[0].cols();
            let mut data = Vec::with_capacity(args.iter().map(|t| t.len()).sum());
            let mut rows = 0;
            for t in args {
                if t.cols() != cols {
                    return Err(shape_err(args[0], t));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::from_vec(rows, cols, data)
        }
        Primitive::GateRows => {
            let (g, v) = (args[0], args[1]);
            if g.shape() != (v.rows(), 1) {
                return Err(shape_err(g, v));
            }
            let mut out = v.clone();
            for r in 0..v.rows() {
                let gr = g.data()[r];
                for x in out.row_mut(r) {
                    *x *= gr;
                }
            }
            out
        }
        Primitive::Relu => map(args[0], &|x| if x > 0.0 { x } else { 0.0 }),
        Primitive::Sigmoid => map(args[0], &sigmoid),
        Primitive::Identity => args[0].clone(),
        Primitive::Mean => {
            let first = args[0];
            let mut acc = first.clone();
            for t in &args[1..] {
                if t.shape() != first.shape() {
                    return Err(shape_err(first, t));
                }
                acc.add_assign(t);
            }
            acc.scale(1.0 / args.len() as f64);
            acc
        }
        Primitive::Sum => Tensor::scalar(args[0].data().iter().sum()),
        Primitive::Standardize { eps } => {
            let a = args[0];
            if a.is_empty() {
                return Ok(a.clone());
            }
            let n = a.len() as f64;
            let mean = a.data().iter().sum::<f64>() / n;
            let var = a.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let d = libm::sqrt(var) + eps;
            map(a, &|x| (x - mean) / d)
        }
        Primitive::RmsRows { eps } => {
            let a = args[0];
            if a.rows() == 0 {
                return Ok(a.clone());
            }
            let q = a.data().iter().map(|v| v * v).sum::<f64>() / a.rows() as f64;
            let r = libm::sqrt(q + eps);
            map(a, &|x| x / r)
        }
        Primitive::Mse => {
            let (p, t) = (args[0], args[1]);
            if p.shape() != t.shape() || p.is_empty() {
                return Err(shape_err(p, t));
            }
            let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
            Tensor::scalar(s / p.len() as f64)
        }
        Primitive::CrossEntropy { label } => {
            let z = args[0];
            if label >= z.len() {
                return Err(AutodiffError::LabelOutOfRange { label, classes: z.len() });
            }
            Tensor::scalar(log_sum_exp(z.data()) - z.data()[label])
        }
    })
}

/// Settings for [`finite_diff_check`].
#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub h: f64,
    /// Coordinates sampled from each group (all of them when the group is smaller).
    pub per_group: usize,
    pub seed: u64,
    /// Replace coordinates whose `±h` probes flip any relu. A central
    /// difference across a kink measures the secant, not the derivative.
    pub skip_kinks: bool,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { h: 1e-5, per_group: 100, seed: 0, skip_kinks: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// `(tensor, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates passed over because a probe crossed a relu kink.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FdError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite function value at tensor {tensor}, coordinate {index}")]
    NonFinite { tensor: usize, index: usize },
    #[error("finite-difference step must be positive")]
    BadStep,
}

/// Compares central differences `(f(p+he) - f(p-he)) / 2h` against
/// [`Tape::backward`] on a seeded random subset of coordinates and returns
/// the largest `|a - b| / max(|a|, |b|, 1e-8)`.
///
/// `f` receives a fresh tape and the leaf ids of `params` (in order) and
/// must return a 1×1 value. `groups` lists tensor indices; up to
/// `per_group` coordinates are drawn from each group.
pub fn finite_diff_check<F>(mut f: F, params: &mut [Tensor], groups: &[Vec<usize>], opts: FdOptions) -> Result<FdReport, FdError>
where
    F: FnMut(&mut Tape, &[ValueId]) -> Result<ValueId, AutodiffError>,
{
    if !(opts.h > 0.0) {
        return Err(FdError::BadStep);
    }
    let eval = |params: &[Tensor], f: &mut F| -> Result<(Tape, Vec<ValueId>, ValueId), AutodiffError> {
        let mut tape = Tape::new();
        let leaves: Vec<ValueId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        Ok((tape, leaves, out))
    };

    let (tape, leaves, out) = eval(params, &mut f)?;
    let base = tape.value(out).data().first().copied().unwrap_or(f64::NAN);
    if !base.is_finite() {
        return Err(FdError::NonFinite { tensor: usize::MAX, index: usize::MAX });
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&id| grads.wrt(id)).collect();
    let pattern = opts.skip_kinks.then(|| tape.relu_pattern());
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FdReport { max_rel_error: 0.0, worst: None, checked: 0, skipped: 0 };
    for group in groups {
        let mut coords: Vec<(usize, usize)> =
            group.iter().flat_map(|&t| (0..params[t].len()).map(move |i| (t, i))).collect();
        let take = opts.per_group.min(coords.len());
        let mut accepted = 0;
        // Lazy Fisher-Yates: entries up to `i` are a uniform sample.
        for i in 0..coords.len() {
            if accepted == take {
                break;
            }
            let j = rand::Rng::random_range(&mut rng, i..coords.len());
            coords.swap(i, j);
            let (t, k) = coords[i];
            let orig = params[t].data()[k];
            params[t].data_mut()[k] = orig + opts.h;
            let plus = eval(params, &mut f);
            params[t].data_mut()[k] = orig - opts.h;
            let minus = eval(params, &mut f);
            params[t].data_mut()[k] = orig;
            let ((tp, _, op), (tm, _, om)) = (plus?, minus?);
            if let Some(p) = &pattern {
                if tp.relu_pattern() != *p || tm.relu_pattern() != *p {
                    report.skipped += 1;
                    continue;
                }
            }
            let (plus, minus) = (tp.value(op).data()[0], tm.value(om).data()[0]);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(FdError::NonFinite { tensor: t, index: k });
            }
            let numeric = (plus - minus) / (2.0 * opts.h);
            let exact = analytic[t].data()[k];
            let rel = (numeric - exact).abs() / numeric.abs().max(exact.abs()).max(1e-8);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((t, k));
            }
            report.checked += 1;
            accepted += 1;
        }
    }
    Ok(report)
}
