//! Define-then-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in construction order, which is also a topological
//! order, so `forward` walks the node list front to back and `backward`
//! walks it back to front exactly once. Leaves are either named inputs
//! (bound at `forward` time, optionally differentiable) or constants.

use std::borrow::Cow;
use std::collections::HashMap;

use super::tensor::{matmul_nn, matmul_nt, matmul_tn, NamedTensors, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Constant,
    Add,
    Sub,
    Scale,
    Mul,
    MatMul,
    Relu,
    SoftmaxRows,
    Mse,
    Concat,
    LayerNorm,
}

#[derive(Debug)]
enum Op {
    Input { name: String, differentiable: bool },
    Constant(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    MatMul { lhs: NodeId, rhs: NodeId, transpose_rhs: bool },
    Relu(NodeId),
    SoftmaxRows(NodeId),
    Mse(NodeId, NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
    LayerNorm { input: NodeId, eps: f64 },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input { .. } => OpKind::Input,
            Op::Constant(_) => OpKind::Constant,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Scale(..) => OpKind::Scale,
            Op::Mul(..) => OpKind::Mul,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Relu(_) => OpKind::Relu,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::Mse(..) => OpKind::Mse,
            Op::Concat { .. } => OpKind::Concat,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    requires_grad: bool,
}

/// Values for the named inputs of a graph.
#[derive(Default)]
pub struct Bindings<'a> {
    map: HashMap<String, Cow<'a, Tensor>>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &'a Tensor) -> &mut Self {
        self.map.insert(name.into(), Cow::Borrowed(value));
        self
    }

    pub fn bind_owned(&mut self, name: impl Into<String>, value: Tensor) -> &mut Self {
        self.map.insert(name.into(), Cow::Owned(value));
        self
    }

    pub fn bind_all(&mut self, named: &'a NamedTensors) -> &mut Self {
        for (name, t) in named {
            self.bind(name.clone(), t);
        }
        self
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name).map(|c| c.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    input_names: HashMap<String, NodeId>,
    values: Vec<Option<Tensor>>,
    output: Option<NodeId>,
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let requires_grad = match &op {
            Op::Input { differentiable, .. } => *differentiable,
            Op::Constant(_) => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => {
                self.requires(*a) || self.requires(*b)
            }
            Op::MatMul { lhs, rhs, .. } => self.requires(*lhs) || self.requires(*rhs),
            Op::Scale(a, _) | Op::Relu(a) | Op::SoftmaxRows(a) => self.requires(*a),
            Op::LayerNorm { input, .. } => self.requires(*input),
            Op::Concat { parts, .. } => parts.iter().any(|p| self.requires(*p)),
        };
        // Any structural change invalidates a previous forward pass.
        self.output = None;
        self.nodes.push(Node {
            op,
            shape,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn input(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        differentiable: bool,
    ) -> Result<NodeId> {
        let name = name.into();
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Graph(format!("input `{name}` has invalid shape {shape:?}")));
        }
        if self.input_names.contains_key(&name) {
            return Err(Error::Graph(format!("input `{name}` declared twice")));
        }
        let id = self.push(
            Op::Input {
                name: name.clone(),
                differentiable,
            },
            shape,
        );
        self.input_names.insert(name, id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    /// Sinusoidal embedding of one time value per row, as a constant.
    /// Gradients do not flow into `times`.
    pub fn time_embedding(&mut self, times: &[f64], dim: usize) -> Result<NodeId> {
        Ok(self.constant(sinusoidal_embedding(times, dim)?))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite("scale factor".into()));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Scale(a, factor), shape))
    }

    fn matrix_dims(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        match *self.shape(id) {
            [r, c] => Ok((r, c)),
            ref other => Err(Error::Shape {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// `lhs · rhs` for rank-2 operands.
    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.matmul_impl(lhs, rhs, false)
    }

    /// `lhs · rhsᵀ` for rank-2 operands.
    pub fn matmul_t(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.matmul_impl(lhs, rhs, true)
    }

    fn matmul_impl(&mut self, lhs: NodeId, rhs: NodeId, transpose_rhs: bool) -> Result<NodeId> {
        let (m, k) = self.matrix_dims("matmul", lhs)?;
        let (r0, r1) = self.matrix_dims("matmul", rhs)?;
        let (rk, n) = if transpose_rhs { (r1, r0) } else { (r0, r1) };
        if k != rk {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(lhs).to_vec(),
                rhs: self.shape(rhs).to_vec(),
            });
        }
        Ok(self.push(
            Op::MatMul {
                lhs,
                rhs,
                transpose_rhs,
            },
            vec![m, n],
        ))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Relu(a), shape))
    }

    /// Softmax over the last axis of every row.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::SoftmaxRows(a), shape))
    }

    /// Mean of squared differences, as a `[1]` tensor.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.same_shape("mse", pred, target)?;
        Ok(self.push(Op::Mse(pred, target), vec![1]))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Graph("concat of zero tensors".into()))?;
        if axis > 1 {
            return Err(Error::Graph(format!("concat axis {axis} unsupported")));
        }
        let (r0, c0) = self.matrix_dims("concat", first)?;
        let (mut rows, mut cols) = (r0, c0);
        for &p in &parts[1..] {
            let (r, c) = self.matrix_dims("concat", p)?;
            let compatible = if axis == 0 { c == c0 } else { r == r0 };
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            if axis == 0 {
                rows += r;
            } else {
                cols += c;
            }
        }
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            vec![rows, cols],
        ))
    }

    /// Normalizes each row to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Graph("layer_norm eps must be positive".into()));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::LayerNorm { input: a, eps }, shape))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].op {
            Op::Constant(t) => t,
            _ => self.values[id.0]
                .as_ref()
                .expect("forward evaluates nodes in order"),
        }
    }

    /// Value of a node computed by the most recent `forward`.
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        if self.output.is_none() {
            return Err(Error::Graph("value requested before forward".into()));
        }
        Ok(self.val(id))
    }

    /// Evaluates every node up to `output` and caches the results.
    pub fn forward(&mut self, inputs: &Bindings<'_>, output: NodeId) -> Result<Tensor> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("unknown output node {}", output.0)));
        }
        self.output = None;
        self.values.clear();
        self.values.resize(self.nodes.len(), None);
        for idx in 0..=output.0 {
            let value = self.eval_node(idx, inputs)?;
            if let Some(v) = &value {
                if v.data().iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("{:?} (node {idx})", self.nodes[idx].op.kind())));
                }
            }
            self.values[idx] = value;
        }
        self.output = Some(output);
        Ok(self.val(output).clone())
    }

    fn eval_node(&self, idx: usize, inputs: &Bindings<'_>) -> Result<Option<Tensor>> {
        let node = &self.nodes[idx];
        let shape = node.shape.clone();
        let data = match &node.op {
            Op::Constant(_) => return Ok(None),
            Op::Input { name, .. } => {
                let bound = inputs
                    .get(name)
                    .ok_or_else(|| Error::Graph(format!("input `{name}` not bound")))?;
                if bound.shape() != node.shape.as_slice() {
                    return Err(Error::Shape {
                        op: "input",
                        lhs: node.shape.clone(),
                        rhs: bound.shape().to_vec(),
                    });
                }
                return Ok(Some(bound.clone()));
            }
            Op::Add(a, b) => zip(self.val(*a), self.val(*b), |x, y| x + y),
            Op::Sub(a, b) => zip(self.val(*a), self.val(*b), |x, y| x - y),
            Op::Mul(a, b) => zip(self.val(*a), self.val(*b), |x, y| x * y),
            Op::Scale(a, f) => self.val(*a).data().iter().map(|v| v * f).collect(),
            Op::MatMul {
                lhs,
                rhs,
                transpose_rhs,
            } => {
                let (a, b) = (self.val(*lhs), self.val(*rhs));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = shape[1];
                if *transpose_rhs {
                    matmul_nt(a.data(), b.data(), m, k, n)
                } else {
                    matmul_nn(a.data(), b.data(), m, k, n)
                }
            }
            Op::Relu(a) => self.val(*a).data().iter().map(|&v| v.max(0.0)).collect(),
            Op::SoftmaxRows(a) => softmax_rows(self.val(*a)),
            Op::Mse(a, b) => {
                let (p, t) = (self.val(*a), self.val(*b));
                let sq: f64 = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                vec![sq / p.len() as f64]
            }
            Op::Concat { parts, axis } => {
                let tensors: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                concat(&tensors, *axis, &shape)
            }
            Op::LayerNorm { input, eps } => layer_norm_rows(self.val(*input), *eps).0,
        };
        Ok(Some(Tensor::from_parts(shape, data)))
    }

    /// Propagates `output_gradient` back through the last forward pass and
    /// returns the gradient of every differentiable input, keyed by name.
    pub fn backward(&self, output_gradient: &Tensor) -> Result<NamedTensors> {
        let output = self
            .output
            .ok_or_else(|| Error::Graph("backward called before forward".into()))?;
        if output_gradient.shape() != self.shape(output) {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(output).to_vec(),
                rhs: output_gradient.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(output_gradient.data().to_vec());

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            // Keep leaf gradients around for collection below.
            if matches!(self.nodes[idx].op, Op::Input { .. }) {
                grads[idx] = Some(g);
            }
        }

        let mut out = NamedTensors::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Input {
                name,
                differentiable: true,
            } = &node.op
            {
                let data = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.shape.iter().product()]);
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of `{name}`")));
                }
                out.insert(name.clone(), Tensor::from_parts(node.shape.clone(), data));
            }
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut send = |id: NodeId, contribution: Vec<f64>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &self.nodes[idx].op {
            Op::Input { .. } | Op::Constant(_) => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Scale(a, f) => send(*a, g.iter().map(|v| v * f).collect()),
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.requires(*a) {
                    send(*a, g.iter().zip(bv.data()).map(|(x, y)| x * y).collect());
                }
                if self.requires(*b) {
                    send(*b, g.iter().zip(av.data()).map(|(x, y)| x * y).collect());
                }
            }
            Op::MatMul {
                lhs,
                rhs,
                transpose_rhs,
            } => {
                let (a, b) = (self.val(*lhs), self.val(*rhs));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = self.nodes[idx].shape[1];
                if *transpose_rhs {
                    // C = A·Bᵀ, B is n×k
                    if self.requires(*lhs) {
                        send(*lhs, matmul_nn(g, b.data(), m, n, k));
                    }
                    if self.requires(*rhs) {
                        send(*rhs, matmul_tn(g, a.data(), m, n, k));
                    }
                } else {
                    // C = A·B, B is k×n
                    if self.requires(*lhs) {
                        send(*lhs, matmul_nt(g, b.data(), m, n, k));
                    }
                    if self.requires(*rhs) {
                        send(*rhs, matmul_tn(a.data(), g, m, k, n));
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.val(*a);
                send(
                    *a,
                    g.iter()
                        .zip(x.data())
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::SoftmaxRows(a) => {
                let y = self.val(NodeId(idx));
                let cols = y.cols();
                let mut out = vec![0.0; g.len()];
                for (r, (yrow, grow)) in y.data().chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let dot: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        out[r * cols + c] = yrow[c] * (grow[c] - dot);
                    }
                }
                send(*a, out);
            }
            Op::Mse(a, b) => {
                let (p, t) = (self.val(*a), self.val(*b));
                let coef = 2.0 * g[0] / p.len() as f64;
                let d: Vec<f64> = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(x, y)| coef * (x - y))
                    .collect();
                if self.requires(*b) {
                    send(*b, d.iter().map(|v| -v).collect());
                }
                send(*a, d);
            }
            Op::Concat { parts, axis } => {
                let cols = self.nodes[idx].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = (self.shape(p)[0], self.shape(p)[1]);
                    if self.requires(p) {
                        let piece = if *axis == 0 {
                            g[offset * cols..(offset + pr) * cols].to_vec()
                        } else {
                            (0..pr)
                                .flat_map(|r| g[r * cols + offset..r * cols + offset + pc].iter().copied())
                                .collect()
                        };
                        send(p, piece);
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::LayerNorm { input, eps } => {
                let x = self.val(*input);
                let (y, inv_std) = layer_norm_rows(x, *eps);
                let cols = x.cols();
                let mut out = vec![0.0; g.len()];
                for r in 0..x.rows() {
                    let grow = &g[r * cols..(r + 1) * cols];
                    let yrow = &y[r * cols..(r + 1) * cols];
                    let mean_g = grow.iter().sum::<f64>() / cols as f64;
                    let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        out[r * cols + c] = inv_std[r] * (grow[c] - mean_g - yrow[c] * mean_gy);
                    }
                }
                send(*input, out);
            }
        }
        Ok(())
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn softmax_rows(x: &Tensor) -> Vec<f64> {
    let cols = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - max).exp()));
        let total: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn layer_norm_rows(x: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let cols = x.cols();
    let mut out = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.rows());
    for row in x.data().chunks(cols) {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let s = 1.0 / (var + eps).sqrt();
        inv_std.push(s);
        out.extend(row.iter().map(|v| (v - mean) * s));
    }
    (out, inv_std)
}

fn concat(parts: &[&Tensor], axis: usize, shape: &[usize]) -> Vec<f64> {
    if axis == 0 {
        parts.iter().flat_map(|t| t.data().iter().copied()).collect()
    } else {
        let rows = shape[0];
        let mut out = Vec::with_capacity(shape[0] * shape[1]);
        for r in 0..rows {
            for t in parts {
                out.extend_from_slice(t.row(r));
            }
        }
        out
    }
}

/// Sinusoidal features `[sin(ω_j t)…, cos(ω_j t)…]` with frequencies spaced
/// geometrically from 1 to 64 rad per unit time, suited to `t ∈ [0, 1]`.
pub fn sinusoidal_embedding(times: &[f64], dim: usize) -> Result<Tensor> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("time embedding dim must be even and >= 2, got {dim}")));
    }
    if times.is_empty() {
        return Err(Error::invalid("time embedding needs at least one time"));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| {
            if half == 1 {
                1.0
            } else {
                (64f64.ln() * j as f64 / (half - 1) as f64).exp()
            }
        })
        .collect();
    let mut data = Vec::with_capacity(times.len() * dim);
    for &t in times {
        if !t.is_finite() {
            return Err(Error::NonFinite("time embedding".into()));
        }
        data.extend(freqs.iter().map(|w| (w * t).sin()));
        data.extend(freqs.iter().map(|w| (w * t).cos()));
    }
    Tensor::new(vec![times.len(), dim], data)
}
