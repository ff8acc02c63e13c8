use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvSpec};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Leaky ReLU with slope 0.1 on the negative side.
    LeakyRelu,
    Sigmoid,
    Silu,
}

pub const LEAKY_SLOPE: f64 = 0.1;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Silu => x * sigmoid(x),
        }
    }

    /// Derivative at `x` given the forward output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, spec: ConvSpec },
    ConvTranspose2d { x: NodeId, w: NodeId, spec: ConvSpec },
    /// Adds `b[c]` along dimension 1.
    AddBias { x: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    Act { x: NodeId, kind: Activation },
    Upsample { x: NodeId, factor: usize },
    Reshape { x: NodeId },
    Matmul { a: NodeId, b: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    /// Batch-statistics normalisation over every dim but 1, then a
    /// per-channel affine map. Keeps the normalised input for backward.
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    /// Scalar output whose local gradients w.r.t. each input were computed
    /// alongside the value.
    Scalar { inputs: Vec<NodeId>, grads: Vec<Tensor> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of forward ops. Node ids are issued in creation order, so
/// every op's inputs precede it and a reverse sweep is a valid backward
/// schedule.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar w.r.t. every gradient-tracking leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Re-keys leaf gradients by parameter name.
    pub fn by_name(mut self, ids: &BTreeMap<String, NodeId>) -> BTreeMap<String, Tensor> {
        ids.iter()
            .filter_map(|(k, id)| self.take(*id).map(|g| (k.clone(), g)))
            .collect()
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; no gradient is computed for it.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_raw(t, Op::Leaf, false)
    }

    /// Learnable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push_raw(t, Op::Leaf, true)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = self.inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, .. } | Op::ConvTranspose2d { x, w, .. } => vec![*x, *w],
            Op::AddBias { x, b } => vec![*x, *b],
            Op::Add { a, b } | Op::Mul { a, b } | Op::Matmul { a, b } => vec![*a, *b],
            Op::Scale { x, .. }
            | Op::Act { x, .. }
            | Op::Upsample { x, .. }
            | Op::Reshape { x }
            | Op::Sum { x }
            | Op::Mean { x } => vec![*x],
            Op::Scalar { inputs, .. } => inputs.clone(),
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, spec: ConvSpec) -> Result<NodeId> {
        let y = kernels::conv2d(self.value(x), self.value(w), spec)?;
        self.push(y, Op::Conv2d { x, w, spec }, "conv2d")
    }

    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, spec: ConvSpec) -> Result<NodeId> {
        let y = kernels::conv_transpose2d(self.value(x), self.value(w), spec)?;
        self.push(y, Op::ConvTranspose2d { x, w, spec }, "conv_transpose2d")
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        let shape = xv.shape();
        if shape.len() < 2 || bv.numel() != shape[1] {
            return Err(Error::Shape(format!(
                "bias of {} values cannot broadcast over {shape:?}",
                bv.numel()
            )));
        }
        let (c, inner) = (shape[1], shape[2..].iter().product::<usize>());
        let mut y = xv.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += bv.data()[(i / inner) % c];
        }
        self.push(y, Op::AddBias { x, b }, "add_bias")
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, Op::Add { a, b }, "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let mut y = self.value(a).clone();
        for (v, o) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *v *= o;
        }
        self.push(y, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push(y, Op::Scale { x, factor }, "scale")
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        if !self.value(x).is_finite() {
            return Err(Error::NonFinite("activation input"));
        }
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v = kind.apply(*v));
        self.push(y, Op::Act { x, kind }, "activation")
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let y = kernels::upsample_nearest(self.value(x), factor)?;
        self.push(y, Op::Upsample { x, factor }, "upsample_nearest")
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let y = self.value(x).clone().reshaped(shape)?;
        self.push(y, Op::Reshape { x }, "reshape")
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), false, bv.data(), false, 0.0, &mut out);
        self.push(Tensor::new(&[m, n], out)?, Op::Matmul { a, b }, "matmul")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let m = v.sum() / v.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean { x }, "mean")
    }

    /// `gamma[c] * (x - mean_c) / sqrt(var_c + eps) + beta[c]` with the
    /// biased mean and variance of channel `c` over the batch and all
    /// spatial positions.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let c = *shape.get(1).unwrap_or(&0);
        if shape.len() < 2 || self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(format!(
                "batch_norm: input {shape:?} with {} scales and {} shifts",
                self.value(gamma).numel(),
                self.value(beta).numel()
            )));
        }
        let inner: usize = shape[2..].iter().product();
        let count = (shape[0] * inner) as f64;
        let mut mean = vec![0.0; c];
        for (i, v) in xv.data().iter().enumerate() {
            mean[(i / inner) % c] += v / count;
        }
        let mut var = vec![0.0; c];
        for (i, v) in xv.data().iter().enumerate() {
            let d = v - mean[(i / inner) % c];
            var[(i / inner) % c] += d * d / count;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for (i, v) in xhat.data_mut().iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *v = (*v - mean[ch]) * inv_std[ch];
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut y = xhat.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *v = g[ch] * *v + b[ch];
        }
        self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "batch_norm",
        )
    }

    /// Records a scalar function of `inputs` whose gradients the caller has
    /// already computed. `grads[i]` must match the shape of `inputs[i]`.
    pub fn scalar_op(
        &mut self,
        inputs: &[NodeId],
        value: f64,
        grads: Vec<Tensor>,
    ) -> Result<NodeId> {
        if inputs.len() != grads.len() {
            return Err(Error::Contract("one gradient per input required".into()));
        }
        for (i, g) in inputs.iter().zip(&grads) {
            if self.value(*i).shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match input {:?}",
                    g.shape(),
                    self.value(*i).shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("scalar op gradient"));
            }
        }
        self.push(
            Tensor::scalar(value),
            Op::Scalar {
                inputs: inputs.to_vec(),
                grads,
            },
            "scalar op",
        )
    }

    /// Reverse sweep from a scalar `loss`. Every gradient-tracking leaf gets
    /// an entry; leaves the loss does not reach get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            for (input, g) in self.local_grads(node, &dy)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| node.value.zeros_like());
                out.insert(NodeId(idx), g);
            }
        }
        Ok(Gradients { grads: out })
    }

    /// Vector-Jacobian products for one node, restricted to inputs that
    /// track gradients.
    fn local_grads(&self, node: &Node, dy: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, spec } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if wants(*x) {
                    out.push((*x, kernels::conv2d_backward_data(dy, wv, xv.dims4(), *spec)?));
                }
                if wants(*w) {
                    out.push((*w, kernels::conv2d_backward_weight(xv, dy, wv.dims4(), *spec)?));
                }
            }
            Op::ConvTranspose2d { x, w, spec } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if wants(*x) {
                    out.push((*x, kernels::conv2d(dy, wv, *spec)?));
                }
                if wants(*w) {
                    out.push((*w, kernels::conv2d_backward_weight(dy, xv, wv.dims4(), *spec)?));
                }
            }
            Op::AddBias { x, b } => {
                if wants(*x) {
                    out.push((*x, dy.clone()));
                }
                if wants(*b) {
                    let shape = dy.shape();
                    let (c, inner) = (shape[1], shape[2..].iter().product::<usize>());
                    let mut db = vec![0.0; c];
                    for (i, g) in dy.data().iter().enumerate() {
                        db[(i / inner) % c] += g;
                    }
                    out.push((*b, Tensor::new(self.value(*b).shape(), db)?));
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    out.push((*a, dy.clone()));
                }
                if wants(*b) {
                    out.push((*b, dy.clone()));
                }
            }
            Op::Mul { a, b } => {
                let prod = |other: &Tensor| {
                    let mut g = dy.clone();
                    g.data_mut().iter_mut().zip(other.data()).for_each(|(g, o)| *g *= o);
                    g
                };
                if wants(*a) {
                    out.push((*a, prod(self.value(*b))));
                }
                if wants(*b) {
                    out.push((*b, prod(self.value(*a))));
                }
            }
            Op::Scale { x, factor } => {
                let mut g = dy.clone();
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
                out.push((*x, g));
            }
            Op::Act { x, kind } => {
                let xv = self.value(*x);
                let mut g = dy.clone();
                for ((g, &xi), &yi) in g.data_mut().iter_mut().zip(xv.data()).zip(node.value.data()) {
                    *g *= kind.derivative(xi, yi);
                }
                out.push((*x, g));
            }
            Op::Upsample { x, factor } => {
                out.push((*x, kernels::upsample_nearest_backward(dy, *factor)?));
            }
            Op::Reshape { x } => {
                out.push((*x, dy.clone().reshaped(self.value(*x).shape())?));
            }
            Op::Matmul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, dy.data(), false, bv.data(), true, 0.0, &mut da);
                    out.push((*a, Tensor::new(&[m, k], da)?));
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, av.data(), true, dy.data(), false, 0.0, &mut db);
                    out.push((*b, Tensor::new(&[k, n], db)?));
                }
            }
            Op::Sum { x } => {
                let s = dy.data()[0];
                let shape = self.value(*x).shape();
                out.push((*x, Tensor::new(shape, vec![s; self.value(*x).numel()])?));
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                let s = dy.data()[0] / n as f64;
                out.push((*x, Tensor::new(self.value(*x).shape(), vec![s; n])?));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let inner: usize = dy.shape()[2..].iter().product();
                let count = (dy.shape()[0] * inner) as f64;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (i, (g, xh)) in dy.data().iter().zip(xhat.data()).enumerate() {
                    let ch = (i / inner) % c;
                    sum_dy[ch] += g;
                    sum_dy_xhat[ch] += g * xh;
                }
                if wants(*x) {
                    let gv = self.value(*gamma).data();
                    let mut dx = dy.clone();
                    for (i, (d, xh)) in dx.data_mut().iter_mut().zip(xhat.data()).enumerate() {
                        let ch = (i / inner) % c;
                        *d = gv[ch] * inv_std[ch] / count * (count * *d - sum_dy[ch] - xh * sum_dy_xhat[ch]);
                    }
                    out.push((*x, dx));
                }
                if wants(*gamma) {
                    out.push((*gamma, Tensor::new(self.value(*gamma).shape(), sum_dy_xhat)?));
                }
                if wants(*beta) {
                    out.push((*beta, Tensor::new(self.value(*beta).shape(), sum_dy)?));
                }
            }
            Op::Scalar { inputs, grads } => {
                let s = dy.data()[0];
                for (i, g) in inputs.iter().zip(grads) {
                    if wants(*i) {
                        let mut g = g.clone();
                        g.data_mut().iter_mut().for_each(|v| *v *= s);
                        out.push((*i, g));
                    }
                }
            }
        }
        Ok(out)
    }
}
