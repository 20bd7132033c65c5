//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is applied, in topological
//! order. [`Graph::backward`] walks the tape once in reverse and accumulates
//! gradients in a fixed order, so results are bit-reproducible.
//! [`Graph::recompute`] replays the forward pass after a leaf has been
//! replaced, which is what the finite-difference checker relies on.

use std::collections::BTreeMap;

use crate::tensor::{self, sigmoid, softmax_slice, Result, Tensor, TensorError, L2_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constants of the capsule margin loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MarginParams {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        Self {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
        }
    }
}

impl MarginParams {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0 && self.lambda > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TensorError::InvalidArgument {
                op: "margin_loss",
                msg: format!("need 0 < m- < m+ < 1 and lambda > 0, got {self:?}"),
            })
        }
    }
}

pub const CE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// Softmax over the last axis.
    Softmax(NodeId),
    Conv2d(NodeId, NodeId, NodeId),
    Reshape(NodeId, Vec<usize>),
    Concat(Vec<NodeId>),
    /// `out[k] = in[indices[k]]`, reshaped to `shape`.
    Gather(NodeId, Vec<usize>, Vec<usize>),
    Sum(NodeId),
    L2Normalize(NodeId),
    /// Squash each row (last axis) of the input.
    Squash(NodeId),
    /// `[P,d_in] x [P,J,d_out,d_in] -> [P,J,d_out]`
    CapsulePredict(NodeId, NodeId),
    /// `[P,J,d] x [P,J] -> [J,d]`
    WeightedSum(NodeId, NodeId),
    /// `[P,J,d] x [J,d] -> [P,J]`
    Agreement(NodeId, NodeId),
    Outer(NodeId, NodeId),
    Inverse(NodeId),
    MarginLoss(NodeId, usize, MarginParams),
    CrossEntropy(NodeId, usize),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatVec(..) => "matvec",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::Conv2d(..) => "conv2d",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Gather(..) => "gather",
            Op::Sum(..) => "sum",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Squash(..) => "squash",
            Op::CapsulePredict(..) => "capsule_predict",
            Op::WeightedSum(..) => "weighted_sum",
            Op::Agreement(..) => "agreement",
            Op::Outer(..) => "outer",
            Op::Inverse(..) => "inverse",
            Op::MarginLoss(..) => "margin_loss",
            Op::CrossEntropy(..) => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::Reshape(a, _)
            | Op::Gather(a, ..)
            | Op::Sum(a)
            | Op::L2Normalize(a)
            | Op::Squash(a)
            | Op::Inverse(a)
            | Op::MarginLoss(a, ..)
            | Op::CrossEntropy(a, _) => vec![*a],
            Op::MatMul(a, b)
            | Op::MatVec(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::CapsulePredict(a, b)
            | Op::WeightedSum(a, b)
            | Op::Agreement(a, b)
            | Op::Outer(a, b) => vec![*a, *b],
            Op::Conv2d(a, b, c) => vec![*a, *b, *c],
            Op::Concat(ids) => ids.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    fault: Option<String>,
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

    /// Negates the backward rule of every op with this name. Used to check
    /// that the gradient checker notices broken derivatives.
    pub fn inject_fault(&mut self, op_name: &str) {
        self.fault = Some(op_name.to_string());
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf. Registering the same name again returns
    /// the existing node, so weights shared across time steps appear once.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value: value.clone(),
            requires_grad: true,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn params(&self) -> &BTreeMap<String, NodeId> {
        &self.params
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// Replaces the value of a leaf. Call [`Graph::recompute`] afterwards.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(TensorError::InvalidArgument {
                op: "set_leaf",
                msg: format!("node {} is not a leaf", id.0),
            });
        }
        if node.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_leaf",
                lhs: node.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        node.value = value;
        Ok(())
    }

    /// Replays every non-leaf node in tape order.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = self.forward(&self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let value = self.forward(&op)?;
        let requires_grad = op.inputs().iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        self.push(Op::MatVec(w, x))
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(a))
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(a))
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(a))
    }
    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::Conv2d(input, kernels, bias))
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Concat(parts.to_vec()))
    }
    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Gather(a, indices, shape.to_vec()))
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::L2Normalize(a))
    }
    pub fn squash(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Squash(a))
    }
    pub fn capsule_predict(&mut self, caps: NodeId, weights: NodeId) -> Result<NodeId> {
        self.push(Op::CapsulePredict(caps, weights))
    }
    pub fn weighted_sum(&mut self, predictions: NodeId, couplings: NodeId) -> Result<NodeId> {
        self.push(Op::WeightedSum(predictions, couplings))
    }
    pub fn agreement(&mut self, predictions: NodeId, outputs: NodeId) -> Result<NodeId> {
        self.push(Op::Agreement(predictions, outputs))
    }
    pub fn outer(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Outer(a, b))
    }
    pub fn inverse(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Inverse(a))
    }
    pub fn margin_loss(&mut self, capsules: NodeId, label: usize, mp: MarginParams) -> Result<NodeId> {
        self.push(Op::MarginLoss(capsules, label, mp))
    }
    pub fn cross_entropy(&mut self, probs: NodeId, label: usize) -> Result<NodeId> {
        self.push(Op::CrossEntropy(probs, label))
    }

    /// Fully-connected layer `W x + b` over a vector.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    fn forward(&self, op: &Op) -> Result<Tensor> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let name = op.name();
        let out = match op {
            Op::Leaf => unreachable!("leaves are never recomputed"),
            Op::MatMul(a, b) => tensor::matmul(v(a), v(b))?,
            Op::MatVec(w, x) => matvec(v(w), v(x))?,
            Op::Transpose(a) => tensor::transpose(v(a))?,
            Op::Add(a, b) => zip_same(name, v(a), v(b), |x, y| x + y)?,
            Op::Sub(a, b) => zip_same(name, v(a), v(b), |x, y| x - y)?,
            Op::Mul(a, b) => zip_same(name, v(a), v(b), |x, y| x * y)?,
            Op::Scale(a, s) => v(a).map(|x| x * s),
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::Tanh(a) => v(a).map(f64::tanh),
            Op::Softmax(a) => {
                let x = v(a);
                let cols = *x.shape().last().expect("non-empty shape");
                let data = x.data().chunks(cols).flat_map(softmax_slice).collect();
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Op::Conv2d(x, k, b) => tensor::conv2d(v(x), v(k), v(b))?,
            Op::Reshape(a, shape) => v(a).reshape(shape)?,
            Op::Concat(ids) => {
                let data: Vec<f64> = ids.iter().flat_map(|id| v(id).data().iter().copied()).collect();
                let n = data.len();
                Tensor::from_parts(vec![n], data)
            }
            Op::Gather(a, indices, shape) => {
                let src = v(a).data();
                if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
                    return Err(TensorError::InvalidArgument {
                        op: name,
                        msg: format!("index {bad} out of range for {} elements", src.len()),
                    });
                }
                Tensor::new(shape.clone(), indices.iter().map(|&i| src[i]).collect())?
            }
            Op::Sum(a) => Tensor::scalar(v(a).sum()),
            Op::L2Normalize(a) => tensor::l2_normalize(v(a)),
            Op::Squash(a) => {
                let x = v(a);
                let cols = *x.shape().last().expect("non-empty shape");
                let data = x.data().chunks(cols).flat_map(tensor::squash_slice).collect();
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Op::CapsulePredict(g, w) => capsule_predict(v(g), v(w))?,
            Op::WeightedSum(p, c) => weighted_sum(v(p), v(c))?,
            Op::Agreement(p, o) => agreement(v(p), v(o))?,
            Op::Outer(a, b) => {
                let (a, b) = (v(a), v(b));
                let data = a.data().iter().flat_map(|x| b.data().iter().map(move |y| x * y)).collect();
                Tensor::from_parts(vec![a.len(), b.len()], data)
            }
            Op::Inverse(a) => tensor::inverse(v(a))?,
            Op::MarginLoss(caps, label, mp) => Tensor::scalar(margin_loss_value(v(caps), *label, mp)?),
            Op::CrossEntropy(p, label) => {
                let p = v(p);
                if *label >= p.len() {
                    return Err(TensorError::InvalidArgument {
                        op: name,
                        msg: format!("label {label} out of range for {} classes", p.len()),
                    });
                }
                Tensor::scalar(-p.data()[*label].max(CE_CLAMP).ln())
            }
        };
        out.check_finite(name)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", lv.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let mut input_grads = self.vjp(&node.op, &node.value, &upstream)?;
            if self.fault.as_deref() == Some(node.op.name()) {
                for g in input_grads.iter_mut().flatten() {
                    *g = g.map(|x| -x);
                }
            }
            for (input, g) in node.op.inputs().into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep the upstream gradient so callers can inspect interior nodes.
            grads[i] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of one op, one entry per input.
    fn vjp(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let needs = |id: &NodeId| self.nodes[id.0].requires_grad;
        let gd = g.data();
        Ok(match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let ga = needs(a)
                    .then(|| tensor::matmul(g, &tensor::transpose(v(b))?))
                    .transpose()?;
                let gb = needs(b)
                    .then(|| tensor::matmul(&tensor::transpose(v(a))?, g))
                    .transpose()?;
                vec![ga, gb]
            }
            Op::MatVec(w, x) => {
                let (wv, xv) = (v(w), v(x));
                let (m, k) = (wv.shape()[0], wv.shape()[1]);
                let gw = needs(w).then(|| {
                    let mut d = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..k {
                            d[i * k + j] = gd[i] * xv.data()[j];
                        }
                    }
                    Tensor::from_parts(vec![m, k], d)
                });
                let gx = needs(x).then(|| {
                    let mut d = vec![0.0; k];
                    for (row, &gi) in wv.data().chunks(k).zip(gd.iter()) {
                        for (dj, wj) in d.iter_mut().zip(row) {
                            *dj += gi * wj;
                        }
                    }
                    Tensor::from_parts(xv.shape().to_vec(), d)
                });
                vec![gw, gx]
            }
            Op::Transpose(_) => vec![Some(tensor::transpose(g)?)],
            Op::Add(..) => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub(..) => vec![Some(g.clone()), Some(g.map(|x| -x))],
            Op::Mul(a, b) => {
                let ga = needs(a).then(|| zip_same("mul", g, v(b), |x, y| x * y)).transpose()?;
                let gb = needs(b).then(|| zip_same("mul", g, v(a), |x, y| x * y)).transpose()?;
                vec![ga, gb]
            }
            Op::Scale(_, s) => vec![Some(g.map(|x| x * s))],
            Op::Sigmoid(_) => vec![Some(zip_same("sigmoid", g, out, |gi, y| gi * y * (1.0 - y))?)],
            Op::Tanh(_) => vec![Some(zip_same("tanh", g, out, |gi, y| gi * (1.0 - y * y))?)],
            Op::Softmax(_) => {
                let cols = *out.shape().last().expect("non-empty shape");
                let mut d = Vec::with_capacity(out.len());
                for (yr, gr) in out.data().chunks(cols).zip(gd.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    d.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                vec![Some(Tensor::from_parts(out.shape().to_vec(), d))]
            }
            Op::Conv2d(x, k, b) => {
                let (gx, gk, gb) = conv2d_backward(v(x), v(k), g, needs(x), needs(k));
                vec![gx, gk, needs(b).then_some(gb)]
            }
            Op::Reshape(a, _) => vec![Some(g.reshape(v(a).shape())?)],
            Op::Concat(ids) => {
                let mut offset = 0;
                ids.iter()
                    .map(|id| {
                        let src = v(id);
                        let part = &gd[offset..offset + src.len()];
                        offset += src.len();
                        needs(id).then(|| Tensor::from_parts(src.shape().to_vec(), part.to_vec()))
                    })
                    .collect()
            }
            Op::Gather(a, indices, _) => {
                let src = v(a);
                let mut d = vec![0.0; src.len()];
                for (&i, &gi) in indices.iter().zip(gd) {
                    d[i] += gi;
                }
                vec![Some(Tensor::from_parts(src.shape().to_vec(), d))]
            }
            Op::Sum(a) => vec![Some(Tensor::full(v(a).shape(), gd[0]))],
            Op::L2Normalize(a) => {
                let x = v(a);
                let n = x.norm();
                if n > L2_EPS {
                    let dot: f64 = out.data().iter().zip(gd).map(|(y, g)| y * g).sum();
                    vec![Some(zip_same("l2_normalize", g, out, |gi, y| (gi - y * dot) / n)?)]
                } else {
                    vec![Some(g.map(|gi| gi / L2_EPS))]
                }
            }
            Op::Squash(a) => {
                let s = v(a);
                let cols = *s.shape().last().expect("non-empty shape");
                let mut d = Vec::with_capacity(s.len());
                for (sr, gr) in s.data().chunks(cols).zip(gd.chunks(cols)) {
                    d.extend(squash_vjp(sr, gr));
                }
                vec![Some(Tensor::from_parts(s.shape().to_vec(), d))]
            }
            Op::CapsulePredict(caps, w) => {
                let (gc, gw) = capsule_predict_backward(v(caps), v(w), g, needs(caps), needs(w));
                vec![gc, gw]
            }
            Op::WeightedSum(p, c) => {
                let (pv, cv) = (v(p), v(c));
                let (np, nj, d) = (pv.shape()[0], pv.shape()[1], pv.shape()[2]);
                let gp = needs(p).then(|| {
                    let mut out = vec![0.0; pv.len()];
                    for i in 0..np {
                        for j in 0..nj {
                            let cij = cv.data()[i * nj + j];
                            for k in 0..d {
                                out[(i * nj + j) * d + k] = cij * gd[j * d + k];
                            }
                        }
                    }
                    Tensor::from_parts(pv.shape().to_vec(), out)
                });
                let gc = needs(c).then(|| {
                    let mut out = vec![0.0; cv.len()];
                    for i in 0..np {
                        for j in 0..nj {
                            let base = (i * nj + j) * d;
                            out[i * nj + j] = (0..d).map(|k| pv.data()[base + k] * gd[j * d + k]).sum();
                        }
                    }
                    Tensor::from_parts(cv.shape().to_vec(), out)
                });
                vec![gp, gc]
            }
            Op::Agreement(p, o) => {
                let (pv, ov) = (v(p), v(o));
                let (np, nj, d) = (pv.shape()[0], pv.shape()[1], pv.shape()[2]);
                let gp = needs(p).then(|| {
                    let mut out = vec![0.0; pv.len()];
                    for i in 0..np {
                        for j in 0..nj {
                            let gij = gd[i * nj + j];
                            for k in 0..d {
                                out[(i * nj + j) * d + k] = gij * ov.data()[j * d + k];
                            }
                        }
                    }
                    Tensor::from_parts(pv.shape().to_vec(), out)
                });
                let go = needs(o).then(|| {
                    let mut out = vec![0.0; ov.len()];
                    for i in 0..np {
                        for j in 0..nj {
                            let gij = gd[i * nj + j];
                            let base = (i * nj + j) * d;
                            for k in 0..d {
                                out[j * d + k] += gij * pv.data()[base + k];
                            }
                        }
                    }
                    Tensor::from_parts(ov.shape().to_vec(), out)
                });
                vec![gp, go]
            }
            Op::Outer(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (m, n) = (av.len(), bv.len());
                let ga = needs(a).then(|| {
                    let d = (0..m)
                        .map(|i| (0..n).map(|j| gd[i * n + j] * bv.data()[j]).sum())
                        .collect();
                    Tensor::from_parts(av.shape().to_vec(), d)
                });
                let gb = needs(b).then(|| {
                    let d = (0..n)
                        .map(|j| (0..m).map(|i| gd[i * n + j] * av.data()[i]).sum())
                        .collect();
                    Tensor::from_parts(bv.shape().to_vec(), d)
                });
                vec![ga, gb]
            }
            Op::Inverse(_) => {
                // d(A^-1) = -A^-1 dA A^-1  =>  gA = -(A^-T) G (A^-T)
                let yt = tensor::transpose(out)?;
                let ga = tensor::matmul(&tensor::matmul(&yt, g)?, &yt)?;
                vec![Some(ga.map(|x| -x))]
            }
            Op::MarginLoss(caps, label, mp) => {
                let c = v(caps);
                let d = *c.shape().last().expect("non-empty shape");
                let mut out = Vec::with_capacity(c.len());
                for (ci, row) in c.data().chunks(d).enumerate() {
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let dl_dn = if ci == *label {
                        -2.0 * (mp.m_plus - norm).max(0.0)
                    } else {
                        2.0 * mp.lambda * (norm - mp.m_minus).max(0.0)
                    };
                    if norm > 0.0 {
                        out.extend(row.iter().map(|x| gd[0] * dl_dn * x / norm));
                    } else {
                        out.extend(std::iter::repeat_n(0.0, d));
                    }
                }
                vec![Some(Tensor::from_parts(c.shape().to_vec(), out))]
            }
            Op::CrossEntropy(p, label) => {
                let pv = v(p);
                let mut d = vec![0.0; pv.len()];
                let pl = pv.data()[*label];
                if pl > CE_CLAMP {
                    d[*label] = -gd[0] / pl;
                }
                vec![Some(Tensor::from_parts(pv.shape().to_vec(), d))]
            }
        })
    }
}

/// Result of a reverse pass: the gradient of the loss with respect to every
/// node that requires one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `id`, or zeros if the loss does not depend on it.
    pub fn wrt(&self, graph: &Graph, id: NodeId) -> Tensor {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()))
    }

    /// Gradients for every named parameter, in name order.
    pub fn params(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        graph
            .params
            .iter()
            .map(|(name, &id)| (name.clone(), self.wrt(graph, id)))
            .collect()
    }
}

fn zip_same(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || x.rank() != 1 || w.shape()[1] != x.len() {
        return Err(TensorError::ShapeMismatch {
            op: "matvec",
            lhs: w.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let k = x.len();
    let data = w
        .data()
        .chunks(k)
        .map(|row| row.iter().zip(x.data()).map(|(a, b)| a * b).sum())
        .collect();
    Ok(Tensor::from_parts(vec![w.shape()[0]], data))
}

fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    g: &Tensor,
    need_x: bool,
    need_k: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (f, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let gd = g.data();
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gk = need_k.then(|| vec![0.0; k.len()]);
    let mut gb = vec![0.0; f];
    for fi in 0..f {
        for y in 0..oh {
            for xo in 0..ow {
                let go = gd[(fi * oh + y) * ow + xo];
                gb[fi] += go;
                if go == 0.0 {
                    continue;
                }
                for ci in 0..c {
                    for ky in 0..kh {
                        let irow = (ci * h + y + ky) * w + xo;
                        let krow = ((fi * c + ci) * kh + ky) * kw;
                        for kx in 0..kw {
                            if let Some(gx) = gx.as_mut() {
                                gx[irow + kx] += go * k.data()[krow + kx];
                            }
                            if let Some(gk) = gk.as_mut() {
                                gk[krow + kx] += go * x.data()[irow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        gk.map(|d| Tensor::from_parts(k.shape().to_vec(), d)),
        Tensor::from_parts(vec![f], gb),
    )
}

fn squash_vjp(s: &[f64], g: &[f64]) -> Vec<f64> {
    let sq: f64 = s.iter().map(|x| x * x).sum();
    if sq == 0.0 {
        return vec![0.0; s.len()];
    }
    let n = sq.sqrt();
    let denom = 1.0 + sq;
    // v = a(n) s with a(n) = n / (1 + n²), a'(n) = (1 - n²) / (1 + n²)²
    let a = n / denom;
    let da_over_n = (1.0 - sq) / (denom * denom) / n;
    let sg: f64 = s.iter().zip(g).map(|(x, y)| x * y).sum();
    s.iter().zip(g).map(|(x, gi)| a * gi + da_over_n * sg * x).collect()
}

pub(crate) fn capsule_predict(caps: &Tensor, w: &Tensor) -> Result<Tensor> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "capsule_predict",
        lhs: caps.shape().to_vec(),
        rhs: w.shape().to_vec(),
    };
    if caps.rank() != 2 || w.rank() != 4 {
        return Err(mismatch());
    }
    let (p, din) = (caps.shape()[0], caps.shape()[1]);
    let (wp, j, dout, wdin) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wp != p || wdin != din {
        return Err(mismatch());
    }
    let mut out = vec![0.0; p * j * dout];
    for i in 0..p {
        let gi = &caps.data()[i * din..(i + 1) * din];
        for jj in 0..j {
            for o in 0..dout {
                let row = &w.data()[((i * j + jj) * dout + o) * din..][..din];
                out[(i * j + jj) * dout + o] = row.iter().zip(gi).map(|(a, b)| a * b).sum();
            }
        }
    }
    Ok(Tensor::from_parts(vec![p, j, dout], out))
}

fn capsule_predict_backward(
    caps: &Tensor,
    w: &Tensor,
    g: &Tensor,
    need_caps: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (p, din) = (caps.shape()[0], caps.shape()[1]);
    let (j, dout) = (w.shape()[1], w.shape()[2]);
    let gd = g.data();
    let gc = need_caps.then(|| {
        let mut d = vec![0.0; caps.len()];
        for i in 0..p {
            for jj in 0..j {
                for o in 0..dout {
                    let go = gd[(i * j + jj) * dout + o];
                    let row = &w.data()[((i * j + jj) * dout + o) * din..][..din];
                    for (k, wk) in row.iter().enumerate() {
                        d[i * din + k] += go * wk;
                    }
                }
            }
        }
        Tensor::from_parts(caps.shape().to_vec(), d)
    });
    let gw = need_w.then(|| {
        let mut d = vec![0.0; w.len()];
        for i in 0..p {
            let gi = &caps.data()[i * din..(i + 1) * din];
            for jj in 0..j {
                for o in 0..dout {
                    let go = gd[(i * j + jj) * dout + o];
                    let base = ((i * j + jj) * dout + o) * din;
                    for (k, gk) in gi.iter().enumerate() {
                        d[base + k] = go * gk;
                    }
                }
            }
        }
        Tensor::from_parts(w.shape().to_vec(), d)
    });
    (gc, gw)
}

pub(crate) fn weighted_sum(pred: &Tensor, c: &Tensor) -> Result<Tensor> {
    if pred.rank() != 3 || c.shape() != &pred.shape()[..2] {
        return Err(TensorError::ShapeMismatch {
            op: "weighted_sum",
            lhs: pred.shape().to_vec(),
            rhs: c.shape().to_vec(),
        });
    }
    let (np, nj, d) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let mut out = vec![0.0; nj * d];
    for i in 0..np {
        for j in 0..nj {
            let cij = c.data()[i * nj + j];
            let base = (i * nj + j) * d;
            for k in 0..d {
                out[j * d + k] += cij * pred.data()[base + k];
            }
        }
    }
    Ok(Tensor::from_parts(vec![nj, d], out))
}

pub(crate) fn agreement(pred: &Tensor, outputs: &Tensor) -> Result<Tensor> {
    if pred.rank() != 3 || outputs.shape() != &pred.shape()[1..] {
        return Err(TensorError::ShapeMismatch {
            op: "agreement",
            lhs: pred.shape().to_vec(),
            rhs: outputs.shape().to_vec(),
        });
    }
    let (np, nj, d) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let mut out = vec![0.0; np * nj];
    for i in 0..np {
        for j in 0..nj {
            let base = (i * nj + j) * d;
            out[i * nj + j] = (0..d).map(|k| pred.data()[base + k] * outputs.data()[j * d + k]).sum();
        }
    }
    Ok(Tensor::from_parts(vec![np, nj], out))
}

/// Margin loss summed over classes; rows of `caps` are class capsules.
pub fn margin_loss_value(caps: &Tensor, label: usize, mp: &MarginParams) -> Result<f64> {
    if caps.rank() != 2 || label >= caps.shape()[0] {
        return Err(TensorError::InvalidArgument {
            op: "margin_loss",
            msg: format!("label {label} invalid for capsules of shape {:?}", caps.shape()),
        });
    }
    let d = caps.shape()[1];
    Ok(caps
        .data()
        .chunks(d)
        .enumerate()
        .map(|(c, row)| {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if c == label {
                (mp.m_plus - norm).max(0.0).powi(2)
            } else {
                mp.lambda * (norm - mp.m_minus).max(0.0).powi(2)
            }
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_gradient_rows_equal_input() {
        let mut g = Graph::new();
        let w = g.param("w", &Tensor::matrix(2, 3, &[0.1, -0.2, 0.3, 0.5, 0.0, 1.0]).unwrap());
        let x = g.constant(Tensor::vector(&[1.0, 2.0, 3.0]).unwrap());
        let y = g.matvec(w, x).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap().params(&g);
        assert_eq!(grads["w"].data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut g = Graph::new();
        let w = g.param("w", &Tensor::vector(&[1.0, 2.0]).unwrap());
        let _unused = g.tanh(w).unwrap();
        let c = g.constant(Tensor::scalar(3.0));
        let loss = g.sum(c).unwrap();
        let grads = g.backward(loss).unwrap().params(&g);
        assert_eq!(grads["w"], Tensor::zeros(&[2]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.param("w", &Tensor::vector(&[1.0, 2.0]).unwrap());
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn shared_param_registers_once() {
        let mut g = Graph::new();
        let t = Tensor::vector(&[1.0]).unwrap();
        let a = g.param("w", &t);
        let b = g.param("w", &t);
        assert_eq!(a, b);
        let s = g.mul(a, b).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap().params(&g);
        assert_eq!(grads["w"].data(), &[2.0]);
    }

    #[test]
    fn shape_mismatch_in_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(&[1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::vector(&[3.0, 4.0]).unwrap());
        let p = g.mul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 8.0]);
        let ones = g.constant(Tensor::ones(&[2]));
        let zeros = g.constant(Tensor::zeros(&[2]));
        let m = g.mul(a, ones).unwrap();
        let s = g.add(a, zeros).unwrap();
        assert_eq!(g.value(m), g.value(a));
        assert_eq!(g.value(s), g.value(a));
    }

    #[test]
    fn margin_loss_hand_cases() {
        let mp = MarginParams::default();
        let mut caps = vec![0.0; 3 * 2];
        caps[0] = 0.95;
        caps[2] = 0.05;
        caps[4] = 0.05;
        let t = Tensor::new(vec![3, 2], caps).unwrap();
        assert_eq!(margin_loss_value(&t, 0, &mp).unwrap(), 0.0);
        let z = Tensor::zeros(&[3, 2]);
        assert!((margin_loss_value(&z, 1, &mp).unwrap() - 0.81).abs() < 1e-15);
    }
}
