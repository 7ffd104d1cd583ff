//! Block-scoped reverse-mode differentiation.
//!
//! A [`ComputeGraph`] is an append-only tape. Every node keeps its forward
//! value; parameters enter as named leaves and everything else enters as a
//! constant. [`ComputeGraph::backward`] walks the tape once in reverse and
//! returns gradients for the named leaves only. Graphs are built per training
//! step and dropped afterwards, so a graph never outlives the block it
//! differentiates.

pub mod kernels;

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

use kernels::{ConvGeom, PoolGeom};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train/eval switch read by batchnorm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// The primitive set. Attributes live on the variant; operands are node ids.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `x[.., in] @ w[in, out] (+ b[out])`; inputs `[x, w]` or `[x, w, b]`.
    Linear,
    /// NHWC input, `[kh, kw, c_in, c_out]` weight; inputs `[x, w]` or `[x, w, b]`.
    Conv2d { stride: usize, pad: usize },
    MaxPool2d { size: usize, stride: usize },
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Log,
    Sqrt,
    /// Normalizes over every axis but the last. Inputs
    /// `[x, gamma, beta, running_mean, running_var]`; the running statistics
    /// are only read in eval mode.
    BatchNorm { eps: f64 },
    /// Softmax over the last axis.
    Softmax,
    LogSoftmax,
    Concat { axis: usize },
    Add,
    Sub,
    Mul,
    Div,
    ScalarMul(f64),
    ScalarAdd(f64),
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    /// Sum of squares over the last axis.
    SquaredL2,
    /// Per-row `-log softmax(logits)[label]`.
    CrossEntropy { labels: Vec<usize> },
    /// `t` (one value per row) to `[sin(s t f_k), cos(s t f_k)]` with
    /// `f_k = 10000^(-k / (dim/2))`.
    TimeEmbedding { dim: usize, scale: f64 },
    /// Inverted dropout. Needs a random stream, so it is only reachable
    /// through [`ComputeGraph::dropout`].
    Dropout { keep_prob: f64 },
    Reshape { shape: Vec<usize> },
    Transpose,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Linear => "linear",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::MaxPool2d { .. } => "max_pool2d",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Softplus => "softplus",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sqrt => "sqrt",
            Primitive::BatchNorm { .. } => "batchnorm",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Concat { .. } => "concat",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::ScalarMul(_) => "scalar_mul",
            Primitive::ScalarAdd(_) => "scalar_add",
            Primitive::Sum { .. } => "sum",
            Primitive::Mean { .. } => "mean",
            Primitive::SquaredL2 => "squared_l2",
            Primitive::CrossEntropy { .. } => "cross_entropy",
            Primitive::TimeEmbedding { .. } => "time_embedding",
            Primitive::Dropout { .. } => "dropout",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Transpose => "transpose",
        }
    }

    /// Looks up an attribute-free primitive by tag, using default attributes
    /// where the primitive has them.
    pub fn from_name(tag: &str) -> Result<Self> {
        Ok(match tag {
            "linear" => Primitive::Linear,
            "conv2d" => Primitive::Conv2d { stride: 1, pad: 0 },
            "max_pool2d" => Primitive::MaxPool2d { size: 2, stride: 2 },
            "relu" => Primitive::Relu,
            "sigmoid" => Primitive::Sigmoid,
            "tanh" => Primitive::Tanh,
            "softplus" => Primitive::Softplus,
            "exp" => Primitive::Exp,
            "log" => Primitive::Log,
            "sqrt" => Primitive::Sqrt,
            "batchnorm" => Primitive::BatchNorm { eps: 1e-5 },
            "softmax" => Primitive::Softmax,
            "log_softmax" => Primitive::LogSoftmax,
            "concat" => Primitive::Concat { axis: 0 },
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "div" => Primitive::Div,
            "sum" => Primitive::Sum { axis: None },
            "mean" => Primitive::Mean { axis: None },
            "squared_l2" => Primitive::SquaredL2,
            "transpose" => Primitive::Transpose,
            other => return Err(Error::UnsupportedOp(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Leaf {
    Param(String),
    Constant,
}

#[derive(Debug, Clone)]
enum Saved {
    None,
    Indices(Vec<usize>),
    Mask(Vec<f64>),
    Norm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf(Leaf),
    Apply {
        prim: Primitive,
        inputs: Vec<NodeId>,
        saved: Saved,
    },
}

#[derive(Debug, Clone)]
struct Node {
    kind: NodeKind,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only record of one block's forward computation.
#[derive(Debug, Clone)]
pub struct ComputeGraph {
    mode: Mode,
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
}

impl ComputeGraph {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Number of recorded nodes; every node holds a live forward value.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&self, id: NodeId) -> Option<&Leaf> {
        match &self.nodes[id.0].kind {
            NodeKind::Leaf(l) => Some(l),
            NodeKind::Apply { .. } => None,
        }
    }

    /// Registers a trainable leaf. Registering the same name twice returns the
    /// first node, so shared parameters accumulate into one gradient.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(NodeKind::Leaf(Leaf::Param(name.to_string())), value.clone(), true);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(NodeKind::Leaf(Leaf::Constant), value, false)
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    /// Per-feature batch mean and variance computed by a train-mode batchnorm
    /// node, for updating running statistics.
    pub fn batch_stats(&self, id: NodeId) -> Option<(Tensor, Tensor)> {
        match &self.nodes[id.0].kind {
            NodeKind::Apply {
                saved: Saved::Norm { mean, var, .. },
                ..
            } => Some((
                Tensor::vector(mean.clone()),
                Tensor::vector(var.clone()),
            )),
            _ => None,
        }
    }

    fn push(&mut self, kind: NodeKind, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            kind,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_ids(&self, inputs: &[NodeId]) -> Result<()> {
        match inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            Some(id) => Err(Error::Contract(format!("node {} is not in this graph", id.0))),
            None => Ok(()),
        }
    }

    /// Evaluates `prim` on existing nodes and appends the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        if matches!(prim, Primitive::Dropout { .. }) {
            return Err(Error::Contract(
                "dropout draws a mask; build it with ComputeGraph::dropout".into(),
            ));
        }
        self.check_ids(inputs)?;
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
        let (value, saved) = forward(&prim, &vals, self.mode)?;
        self.finish(prim, inputs, value, saved)
    }

    fn finish(
        &mut self,
        prim: Primitive,
        inputs: &[NodeId],
        value: Tensor,
        saved: Saved,
    ) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(prim.name()));
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        Ok(self.push(
            NodeKind::Apply {
                prim,
                inputs: inputs.to_vec(),
                saved,
            },
            value,
            needs_grad,
        ))
    }

    /// Inverted dropout keeping each element with probability `keep_prob`.
    /// Identity in eval mode.
    pub fn dropout(&mut self, x: NodeId, keep_prob: f64, stream: &mut RngStream) -> Result<NodeId> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::Config(format!("keep_prob {keep_prob} not in (0, 1]")));
        }
        self.check_ids(&[x])?;
        let xv = &self.nodes[x.0].value;
        let mask: Vec<f64> = match self.mode {
            Mode::Eval => vec![1.0; xv.numel()],
            Mode::Train => (0..xv.numel())
                .map(|_| {
                    if stream.uniform() < keep_prob {
                        1.0 / keep_prob
                    } else {
                        0.0
                    }
                })
                .collect(),
        };
        let value = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        );
        self.finish(Primitive::Dropout { keep_prob }, &[x], value, Saved::Mask(mask))
    }

    /// Reverse-mode gradients of the scalar node `loss` with respect to every
    /// parameter leaf that it depends on.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        self.check_ids(&[loss])?;
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        let mut out = GradMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.kind {
                NodeKind::Leaf(Leaf::Param(name)) => {
                    out.insert(name.clone(), g);
                }
                NodeKind::Leaf(Leaf::Constant) => {}
                NodeKind::Apply {
                    prim,
                    inputs,
                    saved,
                } => {
                    let need: Vec<bool> = inputs.iter().map(|j| self.nodes[j.0].needs_grad).collect();
                    let vals: Vec<&Tensor> = inputs.iter().map(|j| &self.nodes[j.0].value).collect();
                    let input_grads = backward(prim, &vals, &node.value, saved, &g, &need, self.mode)?;
                    for ((j, gi), needed) in inputs.iter().zip(input_grads).zip(need) {
                        let (Some(gi), true) = (gi, needed) else { continue };
                        match &mut grads[j.0] {
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                                    *a += b;
                                }
                            }
                            slot => *slot = Some(gi),
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Convenience builders; each is a thin wrapper over [`ComputeGraph::apply`].
impl ComputeGraph {
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        match b {
            Some(b) => self.apply(Primitive::Linear, &[x, w, b]),
            None => self.apply(Primitive::Linear, &[x, w]),
        }
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.apply(Primitive::Conv2d { stride, pad }, &[x, w, b])
    }

    pub fn max_pool2d(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        self.apply(Primitive::MaxPool2d { size, stride: size }, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Tanh, &[x])
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Softplus, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sqrt, &[x])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Softmax, &[x])
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::LogSoftmax, &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(Primitive::Concat { axis }, xs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Div, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> Result<NodeId> {
        self.apply(Primitive::ScalarMul(k), &[x])
    }

    pub fn offset(&mut self, x: NodeId, k: f64) -> Result<NodeId> {
        self.apply(Primitive::ScalarAdd(k), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sum { axis: None }, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mean { axis: None }, &[x])
    }

    pub fn squared_l2(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::SquaredL2, &[x])
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.apply(
            Primitive::CrossEntropy {
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    pub fn time_embedding(&mut self, t: NodeId, dim: usize, scale: f64) -> Result<NodeId> {
        self.apply(Primitive::TimeEmbedding { dim, scale }, &[t])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Transpose, &[x])
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let shape = [v.rows(), v.row_len()];
        self.reshape(x, &shape)
    }
}

fn arity(prim: &Primitive, n: usize) -> Result<()> {
    let ok = match prim {
        Primitive::Linear | Primitive::Conv2d { .. } => n == 2 || n == 3,
        Primitive::BatchNorm { .. } => n == 5,
        Primitive::Concat { .. } => n >= 1,
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => n == 2,
        _ => n == 1,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "{} does not take {n} inputs",
            prim.name()
        )))
    }
}

/// Splits a shape into (outer rows, last-axis width).
fn rows_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().expect("nonempty shape");
    (shape.iter().product::<usize>() / last, last)
}

/// Shape and broadcast plan for binary elementwise ops. The smaller operand
/// must be a scalar or match a trailing suffix of the larger one.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    RhsRepeats,
    LhsRepeats,
}

fn broadcast(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast)> {
    let an: usize = a.iter().product();
    let bn: usize = b.iter().product();
    if a == b {
        Ok((a.to_vec(), Bcast::Same))
    } else if bn == 1 || (a.len() >= b.len() && a.ends_with(b)) {
        Ok((a.to_vec(), Bcast::RhsRepeats))
    } else if an == 1 || (b.len() >= a.len() && b.ends_with(a)) {
        Ok((b.to_vec(), Bcast::LhsRepeats))
    } else {
        Err(Error::shape("broadcast", a, b))
    }
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (shape, _) = broadcast(a.shape(), b.shape())?;
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = (0..n).map(|i| f(ad[i % ad.len()], bd[i % bd.len()])).collect();
    Ok(Tensor::from_parts(shape, data))
}

/// Sums a full-size gradient down to the operand's (possibly repeated) size.
fn unbroadcast(full: Vec<f64>, target: &Tensor) -> Tensor {
    let n = target.numel();
    if full.len() == n {
        return Tensor::from_parts(target.shape().to_vec(), full);
    }
    let mut out = vec![0.0; n];
    for (i, v) in full.into_iter().enumerate() {
        out[i % n] += v;
    }
    Tensor::from_parts(target.shape().to_vec(), out)
}

fn reduce_axis_shape(shape: &[usize], axis: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
    if axis >= shape.len() {
        return Err(Error::Contract(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
    if out.is_empty() {
        out.push(1);
    }
    Ok((outer, shape[axis], inner, out))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softmax(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn time_freqs(dim: usize) -> Vec<f64> {
    let half = dim / 2;
    (0..half)
        .map(|k| (-(10000f64).ln() * k as f64 / half as f64).exp())
        .collect()
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 || xs[3] != ws[2] || stride == 0 {
        return Err(Error::shape("conv2d", xs, ws));
    }
    if xs[1] + 2 * pad < ws[0] || xs[2] + 2 * pad < ws[1] {
        return Err(Error::shape("conv2d", xs, ws));
    }
    Ok(ConvGeom {
        n: xs[0],
        h: xs[1],
        w: xs[2],
        c_in: xs[3],
        kh: ws[0],
        kw: ws[1],
        c_out: ws[3],
        stride,
        pad,
    })
}

fn pool_geom(x: &Tensor, size: usize, stride: usize) -> Result<PoolGeom> {
    let s = x.shape();
    if s.len() != 4 || size == 0 || stride == 0 || s[1] < size || s[2] < size {
        return Err(Error::shape("max_pool2d", s, &[size, size]));
    }
    Ok(PoolGeom {
        n: s[0],
        h: s[1],
        w: s[2],
        c: s[3],
        size,
        stride,
    })
}

fn forward(prim: &Primitive, x: &[&Tensor], mode: Mode) -> Result<(Tensor, Saved)> {
    arity(prim, x.len())?;
    let unary = |f: &dyn Fn(f64) -> f64| Ok((x[0].map(f), Saved::None));
    match prim {
        Primitive::Linear => {
            let (xv, w) = (x[0], x[1]);
            let (rows, fin) = rows_last(xv.shape());
            if w.ndim() != 2 || w.shape()[0] != fin {
                return Err(Error::shape("linear", xv.shape(), w.shape()));
            }
            let fout = w.shape()[1];
            let mut out = vec![0.0; rows * fout];
            if let Some(b) = x.get(2) {
                if b.numel() != fout {
                    return Err(Error::shape("linear.bias", w.shape(), b.shape()));
                }
                for r in 0..rows {
                    out[r * fout..(r + 1) * fout].copy_from_slice(b.data());
                }
            }
            kernels::gemm(xv.data(), w.data(), &mut out, rows, fin, fout);
            let mut shape = xv.shape().to_vec();
            *shape.last_mut().unwrap() = fout;
            Ok((Tensor::from_parts(shape, out), Saved::None))
        }
        Primitive::Conv2d { stride, pad } => {
            let g = conv_geom(x[0], x[1], *stride, *pad)?;
            let bias = match x.get(2) {
                Some(b) if b.numel() != g.c_out => {
                    return Err(Error::shape("conv2d.bias", x[1].shape(), b.shape()))
                }
                Some(b) => Some(b.data()),
                None => None,
            };
            let out = kernels::conv2d_forward(&g, x[0].data(), x[1].data(), bias);
            Ok((
                Tensor::from_parts(vec![g.n, g.out_h(), g.out_w(), g.c_out], out),
                Saved::None,
            ))
        }
        Primitive::MaxPool2d { size, stride } => {
            let g = pool_geom(x[0], *size, *stride)?;
            let (out, arg) = kernels::maxpool2d_forward(&g, x[0].data());
            Ok((
                Tensor::from_parts(vec![g.n, g.out_h(), g.out_w(), g.c], out),
                Saved::Indices(arg),
            ))
        }
        Primitive::Relu => unary(&|v| v.max(0.0)),
        Primitive::Sigmoid => unary(&sigmoid),
        Primitive::Tanh => unary(&f64::tanh),
        Primitive::Softplus => unary(&softplus),
        Primitive::Exp => unary(&f64::exp),
        Primitive::Log => {
            if x[0].data().iter().any(|&v| v <= 0.0) {
                return Err(Error::NonFinite("log"));
            }
            unary(&f64::ln)
        }
        Primitive::Sqrt => {
            if x[0].data().iter().any(|&v| v < 0.0) {
                return Err(Error::NonFinite("sqrt"));
            }
            unary(&f64::sqrt)
        }
        Primitive::BatchNorm { eps } => {
            let (xv, gamma, beta, rmean, rvar) = (x[0], x[1], x[2], x[3], x[4]);
            let (rows, f) = rows_last(xv.shape());
            for p in [gamma, beta, rmean, rvar] {
                if p.numel() != f {
                    return Err(Error::shape("batchnorm", xv.shape(), p.shape()));
                }
            }
            let xd = xv.data();
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut mean = vec![0.0; f];
                    for r in 0..rows {
                        for j in 0..f {
                            mean[j] += xd[r * f + j];
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= rows as f64);
                    let mut var = vec![0.0; f];
                    for r in 0..rows {
                        for j in 0..f {
                            let d = xd[r * f + j] - mean[j];
                            var[j] += d * d;
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= rows as f64);
                    (mean, var)
                }
                Mode::Eval => (rmean.data().to_vec(), rvar.data().to_vec()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; xd.len()];
            let mut out = vec![0.0; xd.len()];
            for r in 0..rows {
                for j in 0..f {
                    let k = r * f + j;
                    xhat[k] = (xd[k] - mean[j]) * inv_std[j];
                    out[k] = gamma.data()[j] * xhat[k] + beta.data()[j];
                }
            }
            Ok((
                Tensor::from_parts(xv.shape().to_vec(), out),
                Saved::Norm {
                    xhat,
                    inv_std,
                    mean,
                    var,
                },
            ))
        }
        Primitive::Softmax => {
            let (rows, f) = rows_last(x[0].shape());
            let mut out = vec![0.0; rows * f];
            for r in 0..rows {
                stable_softmax(&x[0].data()[r * f..(r + 1) * f], &mut out[r * f..(r + 1) * f]);
            }
            Ok((Tensor::from_parts(x[0].shape().to_vec(), out), Saved::None))
        }
        Primitive::LogSoftmax => {
            let (rows, f) = rows_last(x[0].shape());
            let d = x[0].data();
            let mut out = vec![0.0; rows * f];
            for r in 0..rows {
                let row = &d[r * f..(r + 1) * f];
                let lse = log_sum_exp(row);
                for j in 0..f {
                    out[r * f + j] = row[j] - lse;
                }
            }
            Ok((Tensor::from_parts(x[0].shape().to_vec(), out), Saved::None))
        }
        Primitive::Concat { axis } => {
            let first = x[0].shape();
            if *axis >= first.len() {
                return Err(Error::Contract(format!("concat axis {axis} out of range for {first:?}")));
            }
            for t in &x[1..] {
                let s = t.shape();
                let same = s.len() == first.len()
                    && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                if !same {
                    return Err(Error::shape("concat", first, s));
                }
            }
            let outer: usize = first[..*axis].iter().product();
            let widths: Vec<usize> = x.iter().map(|t| t.numel() / outer).collect();
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(outer * total);
            for o in 0..outer {
                for (t, &w) in x.iter().zip(&widths) {
                    out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = x.iter().map(|t| t.shape()[*axis]).sum();
            Ok((Tensor::from_parts(shape, out), Saved::None))
        }
        Primitive::Add => Ok((binary(x[0], x[1], |a, b| a + b)?, Saved::None)),
        Primitive::Sub => Ok((binary(x[0], x[1], |a, b| a - b)?, Saved::None)),
        Primitive::Mul => Ok((binary(x[0], x[1], |a, b| a * b)?, Saved::None)),
        Primitive::Div => {
            if x[1].data().iter().any(|&v| v == 0.0) {
                return Err(Error::NonFinite("div"));
            }
            Ok((binary(x[0], x[1], |a, b| a / b)?, Saved::None))
        }
        Primitive::ScalarMul(k) => unary(&|v| v * k),
        Primitive::ScalarAdd(k) => unary(&|v| v + k),
        Primitive::Sum { axis } | Primitive::Mean { axis } => {
            let mean = matches!(prim, Primitive::Mean { .. });
            match axis {
                None => {
                    let s = x[0].sum();
                    let v = if mean { s / x[0].numel() as f64 } else { s };
                    Ok((Tensor::scalar(v), Saved::None))
                }
                Some(a) => {
                    let (outer, len, inner, shape) = reduce_axis_shape(x[0].shape(), *a)?;
                    let d = x[0].data();
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                out[o * inner + i] += d[(o * len + k) * inner + i];
                            }
                        }
                    }
                    if mean {
                        out.iter_mut().for_each(|v| *v /= len as f64);
                    }
                    Ok((Tensor::from_parts(shape, out), Saved::None))
                }
            }
        }
        Primitive::SquaredL2 => {
            let s = x[0].shape();
            let (rows, f) = rows_last(s);
            let d = x[0].data();
            let out = (0..rows)
                .map(|r| d[r * f..(r + 1) * f].iter().map(|v| v * v).sum())
                .collect();
            let shape = if s.len() > 1 { s[..s.len() - 1].to_vec() } else { vec![1] };
            Ok((Tensor::from_parts(shape, out), Saved::None))
        }
        Primitive::CrossEntropy { labels } => {
            let (rows, m) = rows_last(x[0].shape());
            if labels.len() != rows {
                return Err(Error::shape("cross_entropy", x[0].shape(), &[labels.len()]));
            }
            if let Some(&y) = labels.iter().find(|&&y| y >= m) {
                return Err(Error::range("label", y, format!("[0, {m})")));
            }
            let d = x[0].data();
            let out = (0..rows)
                .map(|r| {
                    let row = &d[r * m..(r + 1) * m];
                    log_sum_exp(row) - row[labels[r]]
                })
                .collect();
            Ok((Tensor::from_parts(vec![rows], out), Saved::None))
        }
        Primitive::TimeEmbedding { dim, scale } => {
            if *dim == 0 || dim % 2 != 0 {
                return Err(Error::Config(format!("time embedding dim {dim} must be even")));
            }
            let t = x[0].data();
            let freqs = time_freqs(*dim);
            let half = dim / 2;
            let mut out = vec![0.0; t.len() * dim];
            for (r, &tv) in t.iter().enumerate() {
                for (k, f) in freqs.iter().enumerate() {
                    let a = scale * tv * f;
                    out[r * dim + k] = a.sin();
                    out[r * dim + half + k] = a.cos();
                }
            }
            Ok((Tensor::from_parts(vec![t.len(), *dim], out), Saved::None))
        }
        Primitive::Dropout { .. } => Err(Error::Contract("dropout needs a stream".into())),
        Primitive::Reshape { shape } => Ok((x[0].reshape(shape)?, Saved::None)),
        Primitive::Transpose => Ok((x[0].transpose()?, Saved::None)),
    }
}

type InputGrads = Vec<Option<Tensor>>;

fn backward(
    prim: &Primitive,
    x: &[&Tensor],
    y: &Tensor,
    saved: &Saved,
    g: &Tensor,
    need: &[bool],
    mode: Mode,
) -> Result<InputGrads> {
    let gd = g.data();
    let elementwise = |f: &dyn Fn(usize) -> f64| -> InputGrads {
        let data = (0..gd.len()).map(|i| gd[i] * f(i)).collect();
        vec![Some(Tensor::from_parts(x[0].shape().to_vec(), data))]
    };
    let xd = x[0].data();
    let yd = y.data();
    Ok(match prim {
        Primitive::Linear => {
            let w = x[1];
            let (rows, fin) = rows_last(x[0].shape());
            let fout = w.shape()[1];
            let dx = need[0].then(|| {
                let mut dx = vec![0.0; rows * fin];
                kernels::gemm_nt(gd, w.data(), &mut dx, rows, fin, fout);
                Tensor::from_parts(x[0].shape().to_vec(), dx)
            });
            let dw = need[1].then(|| {
                let mut dw = vec![0.0; fin * fout];
                kernels::gemm_tn(xd, gd, &mut dw, rows, fin, fout);
                Tensor::from_parts(w.shape().to_vec(), dw)
            });
            let mut out = vec![dx, dw];
            if x.len() == 3 {
                let db = need[2].then(|| {
                    let mut db = vec![0.0; fout];
                    for r in 0..rows {
                        for j in 0..fout {
                            db[j] += gd[r * fout + j];
                        }
                    }
                    Tensor::from_parts(x[2].shape().to_vec(), db)
                });
                out.push(db);
            }
            out
        }
        Primitive::Conv2d { stride, pad } => {
            let geom = conv_geom(x[0], x[1], *stride, *pad)?;
            let mut dx = need[0].then(|| vec![0.0; x[0].numel()]);
            let mut dw = need[1].then(|| vec![0.0; x[1].numel()]);
            let has_b = x.len() == 3;
            let mut db = (has_b && need[2]).then(|| vec![0.0; x[2].numel()]);
            kernels::conv2d_backward(
                &geom,
                xd,
                x[1].data(),
                gd,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            let mut out = vec![
                dx.map(|d| Tensor::from_parts(x[0].shape().to_vec(), d)),
                dw.map(|d| Tensor::from_parts(x[1].shape().to_vec(), d)),
            ];
            if has_b {
                out.push(db.map(|d| Tensor::from_parts(x[2].shape().to_vec(), d)));
            }
            out
        }
        Primitive::MaxPool2d { .. } => {
            let Saved::Indices(arg) = saved else {
                unreachable!("max_pool2d saves indices")
            };
            let mut dx = vec![0.0; x[0].numel()];
            for (o, &src) in arg.iter().enumerate() {
                dx[src] += gd[o];
            }
            vec![Some(Tensor::from_parts(x[0].shape().to_vec(), dx))]
        }
        Primitive::Relu => elementwise(&|i| if xd[i] > 0.0 { 1.0 } else { 0.0 }),
        Primitive::Sigmoid => elementwise(&|i| yd[i] * (1.0 - yd[i])),
        Primitive::Tanh => elementwise(&|i| 1.0 - yd[i] * yd[i]),
        Primitive::Softplus => elementwise(&|i| sigmoid(xd[i])),
        Primitive::Exp => elementwise(&|i| yd[i]),
        Primitive::Log => elementwise(&|i| 1.0 / xd[i]),
        Primitive::Sqrt => {
            if yd.iter().any(|&v| v == 0.0) {
                return Err(Error::NonFinite("sqrt backward"));
            }
            elementwise(&|i| 0.5 / yd[i])
        }
        Primitive::BatchNorm { .. } => {
            let Saved::Norm { xhat, inv_std, .. } = saved else {
                unreachable!("batchnorm saves statistics")
            };
            let gamma = x[1].data();
            let (rows, f) = rows_last(x[0].shape());
            let mut dgamma = vec![0.0; f];
            let mut dbeta = vec![0.0; f];
            for r in 0..rows {
                for j in 0..f {
                    let k = r * f + j;
                    dgamma[j] += gd[k] * xhat[k];
                    dbeta[j] += gd[k];
                }
            }
            let dx = need[0].then(|| {
                let mut dx = vec![0.0; rows * f];
                match mode {
                    Mode::Train => {
                        let n = rows as f64;
                        for r in 0..rows {
                            for j in 0..f {
                                let k = r * f + j;
                                let dxhat = gd[k] * gamma[j];
                                dx[k] = inv_std[j] / n
                                    * (n * dxhat - gamma[j] * dbeta[j] - xhat[k] * gamma[j] * dgamma[j]);
                            }
                        }
                    }
                    Mode::Eval => {
                        for r in 0..rows {
                            for j in 0..f {
                                dx[r * f + j] = gd[r * f + j] * gamma[j] * inv_std[j];
                            }
                        }
                    }
                }
                Tensor::from_parts(x[0].shape().to_vec(), dx)
            });
            vec![
                dx,
                Some(Tensor::from_parts(x[1].shape().to_vec(), dgamma)),
                Some(Tensor::from_parts(x[2].shape().to_vec(), dbeta)),
                None,
                None,
            ]
        }
        Primitive::Softmax => {
            let (rows, f) = rows_last(y.shape());
            let mut dx = vec![0.0; rows * f];
            for r in 0..rows {
                let s = r * f..(r + 1) * f;
                let dot: f64 = gd[s.clone()].iter().zip(&yd[s.clone()]).map(|(a, b)| a * b).sum();
                for k in s {
                    dx[k] = yd[k] * (gd[k] - dot);
                }
            }
            vec![Some(Tensor::from_parts(y.shape().to_vec(), dx))]
        }
        Primitive::LogSoftmax => {
            let (rows, f) = rows_last(y.shape());
            let mut dx = vec![0.0; rows * f];
            for r in 0..rows {
                let s = r * f..(r + 1) * f;
                let gsum: f64 = gd[s.clone()].iter().sum();
                for k in s {
                    dx[k] = gd[k] - yd[k].exp() * gsum;
                }
            }
            vec![Some(Tensor::from_parts(y.shape().to_vec(), dx))]
        }
        Primitive::Concat { axis } => {
            let outer: usize = x[0].shape()[..*axis].iter().product();
            let widths: Vec<usize> = x.iter().map(|t| t.numel() / outer).collect();
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            let mut out = Vec::with_capacity(x.len());
            for (t, &w) in x.iter().zip(&widths) {
                let mut d = Vec::with_capacity(t.numel());
                for o in 0..outer {
                    d.extend_from_slice(&gd[o * total + offset..o * total + offset + w]);
                }
                offset += w;
                out.push(Some(Tensor::from_parts(t.shape().to_vec(), d)));
            }
            out
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            let (a, b) = (x[0].data(), x[1].data());
            let (an, bn) = (a.len(), b.len());
            let n = gd.len();
            let (da, db): (Vec<f64>, Vec<f64>) = match prim {
                Primitive::Add => (gd.to_vec(), gd.to_vec()),
                Primitive::Sub => (gd.to_vec(), gd.iter().map(|v| -v).collect()),
                Primitive::Mul => (
                    (0..n).map(|i| gd[i] * b[i % bn]).collect(),
                    (0..n).map(|i| gd[i] * a[i % an]).collect(),
                ),
                _ => (
                    (0..n).map(|i| gd[i] / b[i % bn]).collect(),
                    (0..n)
                        .map(|i| -gd[i] * a[i % an] / (b[i % bn] * b[i % bn]))
                        .collect(),
                ),
            };
            vec![
                need[0].then(|| unbroadcast(da, x[0])),
                need[1].then(|| unbroadcast(db, x[1])),
            ]
        }
        Primitive::ScalarMul(k) => elementwise(&|_| *k),
        Primitive::ScalarAdd(_) => elementwise(&|_| 1.0),
        Primitive::Sum { axis } | Primitive::Mean { axis } => {
            let mean = matches!(prim, Primitive::Mean { .. });
            match axis {
                None => {
                    let k = if mean { gd[0] / xd.len() as f64 } else { gd[0] };
                    vec![Some(Tensor::filled(x[0].shape(), k))]
                }
                Some(a) => {
                    let (outer, len, inner, _) = reduce_axis_shape(x[0].shape(), *a)?;
                    let scale = if mean { 1.0 / len as f64 } else { 1.0 };
                    let mut dx = vec![0.0; x[0].numel()];
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                dx[(o * len + k) * inner + i] = gd[o * inner + i] * scale;
                            }
                        }
                    }
                    vec![Some(Tensor::from_parts(x[0].shape().to_vec(), dx))]
                }
            }
        }
        Primitive::SquaredL2 => {
            let (_, f) = rows_last(x[0].shape());
            let d = xd.iter().enumerate().map(|(i, v)| 2.0 * v * gd[i / f]).collect();
            vec![Some(Tensor::from_parts(x[0].shape().to_vec(), d))]
        }
        Primitive::CrossEntropy { labels } => {
            let (rows, m) = rows_last(x[0].shape());
            let mut dx = vec![0.0; rows * m];
            for r in 0..rows {
                let s = r * m..(r + 1) * m;
                stable_softmax(&xd[s.clone()], &mut dx[s]);
                dx[r * m + labels[r]] -= 1.0;
                for v in &mut dx[r * m..(r + 1) * m] {
                    *v *= gd[r];
                }
            }
            vec![Some(Tensor::from_parts(x[0].shape().to_vec(), dx))]
        }
        Primitive::TimeEmbedding { dim, scale } => {
            let freqs = time_freqs(*dim);
            let half = dim / 2;
            let dt = xd
                .iter()
                .enumerate()
                .map(|(r, &tv)| {
                    freqs
                        .iter()
                        .enumerate()
                        .map(|(k, f)| {
                            let a = scale * tv * f;
                            scale * f * (gd[r * dim + k] * a.cos() - gd[r * dim + half + k] * a.sin())
                        })
                        .sum()
                })
                .collect();
            vec![Some(Tensor::from_parts(x[0].shape().to_vec(), dt))]
        }
        Primitive::Dropout { .. } => {
            let Saved::Mask(mask) = saved else {
                unreachable!("dropout saves its mask")
            };
            elementwise(&|i| mask[i])
        }
        Primitive::Reshape { .. } => {
            vec![Some(Tensor::from_parts(x[0].shape().to_vec(), gd.to_vec()))]
        }
        Primitive::Transpose => vec![Some(g.transpose()?)],
    })
}

#[cfg(test)]
mod tests;
