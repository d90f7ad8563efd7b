//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and the indices of its
//! parents. Since a node can only reference nodes recorded before it, the
//! tape order is a topological order and `backward` is a single reverse sweep.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, ConvGeometry, Tensor};

type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, geom: ConvGeometry },
    AddChannelBias { input: NodeId, bias: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    Gap(NodeId),
    Linear { input: NodeId, weight: NodeId, bias: NodeId },
    Bce { logit: NodeId, target: f64 },
    Dot(NodeId, NodeId),
    Stack(Vec<NodeId>),
    LogSumExp(NodeId),
    Log1pSumExp(NodeId),
    SelectCell { input: NodeId, row: usize, col: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward computation. Single writer: build it, run
/// `backward` once, drop it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: NodeId) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, name: &str, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[NodeId]) -> Result<Var<'_>> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = self.requires(parents);
        Ok(self.push(Tensor::from_parts(shape, data), op, requires_grad))
    }

    /// Reverse sweep from a scalar `loss`, visiting each node once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(self, loss.tape) {
            return Err(Error::contract("loss belongs to a different tape"));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, delta: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: NodeId| nodes[id].value.data();
    let wants = |id: NodeId| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { input, kernel, geom } => {
            if wants(*input) {
                let d = geom.grad_input(g, val(*kernel));
                accumulate(grads, nodes, *input, d);
            }
            if wants(*kernel) {
                let d = geom.grad_kernel(g, val(*input));
                accumulate(grads, nodes, *kernel, d);
            }
        }
        Op::AddChannelBias { input, bias } => {
            accumulate(grads, nodes, *input, g.to_vec());
            if wants(*bias) {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let plane: usize = shape[2..].iter().product();
                let mut d = vec![0.0; c];
                for b in 0..n {
                    for (ch, dc) in d.iter_mut().enumerate() {
                        let start = (b * c + ch) * plane;
                        *dc += g[start..start + plane].iter().sum::<f64>();
                    }
                }
                accumulate(grads, nodes, *bias, d);
            }
        }
        Op::Relu(x) => {
            let y = node.value.data();
            let d = g.iter().zip(y).map(|(&g, &y)| if y > 0.0 { g } else { 0.0 }).collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            let d = g.iter().zip(y).map(|(&g, &y)| g * y * (1.0 - y)).collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if wants(*a) {
                accumulate(grads, nodes, *a, g.iter().zip(vb).map(|(g, b)| g * b).collect());
            }
            if wants(*b) {
                accumulate(grads, nodes, *b, g.iter().zip(va).map(|(g, a)| g * a).collect());
            }
        }
        Op::Scale(x, c) => {
            accumulate(grads, nodes, *x, g.iter().map(|v| v * c).collect());
        }
        Op::Sum(x) => {
            let n = nodes[*x].value.len();
            accumulate(grads, nodes, *x, vec![g[0]; n]);
        }
        Op::Mean(x) => {
            let n = nodes[*x].value.len();
            accumulate(grads, nodes, *x, vec![g[0] / n as f64; n]);
        }
        Op::Gap(x) => {
            let shape = nodes[*x].value.shape();
            let plane: usize = shape[2..].iter().product();
            let inv = 1.0 / plane as f64;
            let d = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, plane)).collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::Linear { input, weight, bias } => {
            let xs = nodes[*input].value.shape();
            let (n, fan_in) = (xs[0], xs[1]);
            let fan_out = nodes[*weight].value.shape()[0];
            let (x, w) = (val(*input), val(*weight));
            if wants(*input) {
                let mut d = vec![0.0; n * fan_in];
                for r in 0..n {
                    for o in 0..fan_out {
                        let go = g[r * fan_out + o];
                        for i in 0..fan_in {
                            d[r * fan_in + i] += go * w[o * fan_in + i];
                        }
                    }
                }
                accumulate(grads, nodes, *input, d);
            }
            if wants(*weight) {
                let mut d = vec![0.0; fan_out * fan_in];
                for r in 0..n {
                    for o in 0..fan_out {
                        let go = g[r * fan_out + o];
                        for i in 0..fan_in {
                            d[o * fan_in + i] += go * x[r * fan_in + i];
                        }
                    }
                }
                accumulate(grads, nodes, *weight, d);
            }
            if wants(*bias) {
                let mut d = vec![0.0; fan_out];
                for r in 0..n {
                    for o in 0..fan_out {
                        d[o] += g[r * fan_out + o];
                    }
                }
                accumulate(grads, nodes, *bias, d);
            }
        }
        Op::Bce { logit, target } => {
            let z = val(*logit);
            let d = z.iter().map(|&z| g[0] * (sigmoid(z) - target)).collect();
            accumulate(grads, nodes, *logit, d);
        }
        Op::Dot(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if wants(*a) {
                accumulate(grads, nodes, *a, vb.iter().map(|v| g[0] * v).collect());
            }
            if wants(*b) {
                accumulate(grads, nodes, *b, va.iter().map(|v| g[0] * v).collect());
            }
        }
        Op::Stack(items) => {
            for (i, &id) in items.iter().enumerate() {
                accumulate(grads, nodes, id, vec![g[i]]);
            }
        }
        Op::LogSumExp(x) => {
            let v = val(*x);
            let lse = node.value.data()[0];
            let d = v.iter().map(|&vi| g[0] * (vi - lse).exp()).collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::Log1pSumExp(x) => {
            let v = val(*x);
            let out = node.value.data()[0];
            let d = v.iter().map(|&vi| g[0] * (vi - out).exp()).collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::SelectCell { input, row, col } => {
            let shape = nodes[*input].value.shape();
            let (c, h, w) = (shape[1], shape[2], shape[3]);
            let mut d = vec![0.0; c * h * w];
            for (k, gk) in g.iter().enumerate() {
                d[(k * h + row) * w + col] = *gk;
            }
            accumulate(grads, nodes, *input, d);
        }
    }
}

/// Gradients of a scalar loss with respect to every differentiable node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the loss does not depend on it or
    /// it was recorded as a constant.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, with zeros standing in for "no dependence".
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        self.tape.value(self.id).data()[0]
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands recorded on different tapes"))
        }
    }

    fn unary(&self, name: &str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let (shape, data) = {
            let v = self.tape.value(self.id);
            (v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
        };
        self.tape.record(name, shape, data, op, &[self.id])
    }

    fn binary(&self, other: Var<'t>, name: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (shape, data) = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            if a.shape() != b.shape() {
                return Err(Error::dim(format!(
                    "{name}: shapes differ {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            (
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
        };
        self.tape.record(name, shape, data, op, &[self.id, other.id])
    }

    pub fn conv2d(&self, kernel: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(&kernel)?;
        let (geom, data) = {
            let x = self.tape.value(self.id);
            let k = self.tape.value(kernel.id);
            let geom = ConvGeometry::new(x.shape(), k.shape(), stride, pad)?;
            let data = geom.forward(x.data(), k.data());
            (geom, data)
        };
        self.tape.record(
            "conv2d",
            geom.output_shape(),
            data,
            Op::Conv2d { input: self.id, kernel: kernel.id, geom },
            &[self.id, kernel.id],
        )
    }

    /// Adds `bias[c]` to every element of channel `c` of an NCHW tensor.
    pub fn add_channel_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias)?;
        let (shape, data) = {
            let x = self.tape.value(self.id);
            let b = self.tape.value(bias.id);
            let shape = x.shape().to_vec();
            if shape.len() < 2 || b.shape() != [shape[1]] {
                return Err(Error::dim(format!(
                    "channel bias {:?} does not fit input {:?}",
                    b.shape(),
                    shape
                )));
            }
            let c = shape[1];
            let plane: usize = shape[2..].iter().product();
            let mut data = x.data().to_vec();
            for (i, v) in data.iter_mut().enumerate() {
                *v += b.data()[(i / plane) % c];
            }
            (shape, data)
        };
        self.tape.record(
            "add_channel_bias",
            shape,
            data,
            Op::AddChannelBias { input: self.id, bias: bias.id },
            &[self.id, bias.id],
        )
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary("relu", Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), sigmoid)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, factor), |x| x * factor)
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.tape.value(self.id).sum();
        self.tape.record("sum", vec![], vec![s], Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let m = {
            let v = self.tape.value(self.id);
            if v.is_empty() {
                return Err(Error::dim("mean of an empty tensor"));
            }
            v.mean()
        };
        self.tape.record("mean", vec![], vec![m], Op::Mean(self.id), &[self.id])
    }

    /// Global average pooling, NCHW → NC.
    pub fn gap(&self) -> Result<Var<'t>> {
        let (shape, data) = {
            let v = self.tape.value(self.id);
            if v.rank() != 4 {
                return Err(Error::dim(format!("gap expects NCHW, got {:?}", v.shape())));
            }
            let (n, c) = (v.shape()[0], v.shape()[1]);
            let plane = v.shape()[2] * v.shape()[3];
            let data = v
                .data()
                .chunks(plane)
                .map(|p| p.iter().sum::<f64>() / plane as f64)
                .collect();
            (vec![n, c], data)
        };
        self.tape.record("gap", shape, data, Op::Gap(self.id), &[self.id])
    }

    /// `x · Wᵀ + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&weight)?;
        self.same_tape(&bias)?;
        let (shape, data) = {
            let x = self.tape.value(self.id);
            let w = self.tape.value(weight.id);
            let b = self.tape.value(bias.id);
            if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] || b.shape() != [w.shape()[0]] {
                return Err(Error::dim(format!(
                    "linear: x {:?}, W {:?}, b {:?} do not conform",
                    x.shape(),
                    w.shape(),
                    b.shape()
                )));
            }
            let (n, fan_in, fan_out) = (x.shape()[0], x.shape()[1], w.shape()[0]);
            let mut out = vec![0.0; n * fan_out];
            for r in 0..n {
                let xr = &x.data()[r * fan_in..(r + 1) * fan_in];
                for o in 0..fan_out {
                    let wo = &w.data()[o * fan_in..(o + 1) * fan_in];
                    out[r * fan_out + o] = xr.iter().zip(wo).map(|(a, b)| a * b).sum::<f64>() + b.data()[o];
                }
            }
            (vec![n, fan_out], out)
        };
        self.tape.record(
            "linear",
            shape,
            data,
            Op::Linear { input: self.id, weight: weight.id, bias: bias.id },
            &[self.id, weight.id, bias.id],
        )
    }

    /// Binary cross entropy of a single logit against a target in `[0, 1]`.
    pub fn bce_loss(&self, target: f64) -> Result<Var<'t>> {
        let loss = {
            let z = self.tape.value(self.id);
            crate::tensor::bce_with_logit(z.item()?, target)?
        };
        self.tape.record("bce_loss", vec![], vec![loss], Op::Bce { logit: self.id, target }, &[self.id])
    }

    pub fn dot(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let d = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            if a.shape() != b.shape() {
                return Err(Error::dim(format!("dot: shapes differ {:?} vs {:?}", a.shape(), b.shape())));
            }
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>()
        };
        self.tape.record("dot", vec![], vec![d], Op::Dot(self.id, other.id), &[self.id, other.id])
    }

    /// Numerically stable `ln Σ exp(x_i)` over all elements.
    pub fn logsumexp(&self) -> Result<Var<'t>> {
        let lse = {
            let v = self.tape.value(self.id);
            if v.is_empty() {
                return Err(Error::dim("logsumexp of an empty tensor"));
            }
            let m = v.max();
            m + v.data().iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        };
        self.tape.record("logsumexp", vec![], vec![lse], Op::LogSumExp(self.id), &[self.id])
    }

    /// Numerically stable `ln(1 + Σ exp(x_i))`.
    pub fn log1p_sum_exp(&self) -> Result<Var<'t>> {
        let out = {
            let v = self.tape.value(self.id);
            let m = v.max().max(0.0);
            if m == 0.0 {
                v.data().iter().map(|x| x.exp()).sum::<f64>().ln_1p()
            } else {
                m + ((-m).exp() + v.data().iter().map(|x| (x - m).exp()).sum::<f64>()).ln()
            }
        };
        self.tape.record("log1p_sum_exp", vec![], vec![out], Op::Log1pSumExp(self.id), &[self.id])
    }

    /// The channel vector `input[0, :, row, col]` of a `1×C×H×W` map.
    pub fn select_cell(&self, row: usize, col: usize) -> Result<Var<'t>> {
        let data = {
            let v = self.tape.value(self.id);
            let s = v.shape();
            if s.len() != 4 || s[0] != 1 {
                return Err(Error::dim(format!("select_cell expects 1xCxHxW, got {s:?}")));
            }
            if row >= s[2] || col >= s[3] {
                return Err(Error::contract(format!("cell ({row},{col}) outside {}x{} grid", s[2], s[3])));
            }
            (0..s[1]).map(|k| v.data()[(k * s[2] + row) * s[3] + col]).collect::<Vec<_>>()
        };
        let c = data.len();
        self.tape.record(
            "select_cell",
            vec![c],
            data,
            Op::SelectCell { input: self.id, row, col },
            &[self.id],
        )
    }
}

/// Stacks single-element nodes into a vector.
pub fn stack<'t>(items: &[Var<'t>]) -> Result<Var<'t>> {
    let first = items.first().ok_or_else(|| Error::dim("stack of zero items"))?;
    let tape = first.tape;
    let mut data = Vec::with_capacity(items.len());
    for v in items {
        first.same_tape(v)?;
        data.push(tape.value(v.id).item()?);
    }
    let ids: Vec<NodeId> = items.iter().map(|v| v.id).collect();
    tape.record("stack", vec![items.len()], data, Op::Stack(ids.clone()), &ids)
}
