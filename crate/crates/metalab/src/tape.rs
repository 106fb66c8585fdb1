//! Re-differentiable reverse-mode autodiff tape.
//!
//! The tape evaluates eagerly: creating a node computes its value. `grad`
//! builds the backward pass *as new tape nodes*, so calling `grad` on the
//! result of a previous `grad` yields exact second-order derivatives. This is
//! what carries the second-order terms of the MAML outer loop.
//!
//! Every reduction uses a fixed sequential summation order, and gradient
//! accumulation happens in descending node-id order, so results are bitwise
//! reproducible.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::rc::Rc;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Relu(NodeId),
    /// 1 where input > 0, else 0. Not differentiable (zero gradient).
    ReluMask(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    /// Identity forward, blocks gradient flow.
    Detach(NodeId),
    /// Row-major reinterpretation of the data under a new shape.
    Reshape(NodeId, Vec<usize>),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    SumAll(NodeId),
    BroadcastScalar(NodeId, Vec<usize>),
    /// [N,D] -> [D]
    SumAxis0(NodeId),
    /// [D] -> [N,D]
    BroadcastAxis0(NodeId, usize),
    /// [N,D] -> [N]
    SumAxis1(NodeId),
    /// [N] -> [N,D]
    BroadcastAxis1(NodeId, usize),
    /// Per-row maximum, [N,D] -> [N]. Zero gradient; use behind `detach`.
    RowMax(NodeId),
    /// out[i] = x[i, idx[i]]
    GatherCols(NodeId, Rc<Vec<usize>>),
    /// out[i, idx[i]] = v[i], zeros elsewhere; [N] -> [N,D]
    ScatterCols(NodeId, Rc<Vec<usize>>, usize),
    /// [N,C,H,W] -> [C]
    ChannelSum(NodeId),
    /// [C] -> [N,C,H,W]
    ChannelBroadcast(NodeId, Vec<usize>),
    /// 3x3, stride 1, zero padding 1: (x [N,Ci,H,W], w [Co,Ci,3,3]) -> [N,Co,H,W]
    Conv2d(NodeId, NodeId),
    /// Adjoint of conv w.r.t. input: (gy [N,Co,H,W], w) -> [N,Ci,H,W]
    ConvIGrad(NodeId, NodeId),
    /// Adjoint of conv w.r.t. weight: (x, gy) -> [Co,Ci,3,3]
    ConvWGrad(NodeId, NodeId),
    /// 2x2/2 max-pool selection: value of `v` at argmax positions of `x`.
    /// `maxpool(x)` is `PoolSelect(x, x)`. Gradient flows through `v` only.
    PoolSelect(NodeId, NodeId),
    /// Adjoint of PoolSelect w.r.t. `v`: scatter `g` to argmax positions of `x`.
    PoolScatter(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Eagerly-evaluated computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        self.nodes[id].value.scalar_value()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value });
        Ok(self.nodes.len() - 1)
    }

    /// Introduce an input/parameter value.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value)
    }

    pub fn scalar(&mut self, v: f64) -> Result<NodeId> {
        self.leaf(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.zip(&self.nodes[b].value, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.zip(&self.nodes[b].value, "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), v, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.zip(&self.nodes[b].value, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), v, "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.zip(&self.nodes[b].value, "div", |x, y| x / y)?;
        self.push(Op::Div(a, b), v, "div")
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.map(|x| -x);
        self.push(Op::Neg(a), v, "neg")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.map(f64::exp);
        self.push(Op::Exp(a), v, "exp")
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.map(f64::ln);
        self.push(Op::Ln(a), v, "ln")
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.map(f64::sqrt);
        self.push(Op::Sqrt(a), v, "sqrt")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v, "relu")
    }

    pub fn relu_mask(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(Op::ReluMask(a), v, "relu_mask")
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.nodes[a].value.scale(s);
        self.push(Op::Scale(a, s), v, "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.nodes[a].value.map(|x| x + s);
        self.push(Op::AddScalar(a, s), v, "add_scalar")
    }

    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.clone();
        self.push(Op::Detach(a), v, "detach")
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.nodes[a].value.reshaped(shape.clone())?;
        self.push(Op::Reshape(a, shape), v, "reshape")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        self.push(Op::MatMul(a, b), v, "matmul")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.transposed()?;
        self.push(Op::Transpose(a), v, "transpose")
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.nodes[a].value.sum());
        self.push(Op::SumAll(a), v, "sum_all")
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a].value.len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let s = self.nodes[a].value.scalar_value()?;
        let v = Tensor::full(shape.clone(), s);
        self.push(Op::BroadcastScalar(a, shape), v, "broadcast_scalar")
    }

    fn expect_rank2(&self, a: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.nodes[a].value.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op, detail: format!("expected rank 2, got {:?}", s) });
        }
        Ok((s[0], s[1]))
    }

    pub fn sum_axis0(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, d) = self.expect_rank2(a, "sum_axis0")?;
        let x = self.nodes[a].value.data();
        let mut out = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                out[j] += x[i * d + j];
            }
        }
        self.push(Op::SumAxis0(a), Tensor::from_vec(out), "sum_axis0")
    }

    pub fn broadcast_axis0(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let s = self.nodes[a].value.shape().to_vec();
        if s.len() != 1 {
            return Err(Error::ShapeMismatch { op: "broadcast_axis0", detail: format!("{:?}", s) });
        }
        let d = s[0];
        let x = self.nodes[a].value.data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            out[i * d..(i + 1) * d].copy_from_slice(x);
        }
        self.push(Op::BroadcastAxis0(a, n), Tensor::new(vec![n, d], out)?, "broadcast_axis0")
    }

    pub fn sum_axis1(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, d) = self.expect_rank2(a, "sum_axis1")?;
        let x = self.nodes[a].value.data();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..d {
                acc += x[i * d + j];
            }
            out[i] = acc;
        }
        self.push(Op::SumAxis1(a), Tensor::from_vec(out), "sum_axis1")
    }

    pub fn broadcast_axis1(&mut self, a: NodeId, d: usize) -> Result<NodeId> {
        let s = self.nodes[a].value.shape().to_vec();
        if s.len() != 1 {
            return Err(Error::ShapeMismatch { op: "broadcast_axis1", detail: format!("{:?}", s) });
        }
        let n = s[0];
        let x = self.nodes[a].value.data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = x[i];
            }
        }
        self.push(Op::BroadcastAxis1(a, d), Tensor::new(vec![n, d], out)?, "broadcast_axis1")
    }

    pub fn row_max(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, d) = self.expect_rank2(a, "row_max")?;
        let x = self.nodes[a].value.data();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut m = f64::NEG_INFINITY;
            for j in 0..d {
                let v = x[i * d + j];
                if v > m {
                    m = v;
                }
            }
            out[i] = m;
        }
        self.push(Op::RowMax(a), Tensor::from_vec(out), "row_max")
    }

    pub fn gather_cols(&mut self, a: NodeId, idx: Rc<Vec<usize>>) -> Result<NodeId> {
        let (n, d) = self.expect_rank2(a, "gather_cols")?;
        if idx.len() != n || idx.iter().any(|&j| j >= d) {
            return Err(Error::ShapeMismatch { op: "gather_cols", detail: format!("{} indices for {}x{}", idx.len(), n, d) });
        }
        let x = self.nodes[a].value.data();
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| x[i * d + j]).collect();
        self.push(Op::GatherCols(a, idx), Tensor::from_vec(out), "gather_cols")
    }

    pub fn scatter_cols(&mut self, a: NodeId, idx: Rc<Vec<usize>>, d: usize) -> Result<NodeId> {
        let s = self.nodes[a].value.shape().to_vec();
        if s.len() != 1 || s[0] != idx.len() {
            return Err(Error::ShapeMismatch { op: "scatter_cols", detail: format!("{:?}", s) });
        }
        let n = s[0];
        let x = self.nodes[a].value.data();
        let mut out = vec![0.0; n * d];
        for (i, &j) in idx.iter().enumerate() {
            out[i * d + j] = x[i];
        }
        self.push(Op::ScatterCols(a, idx, d), Tensor::new(vec![n, d], out)?, "scatter_cols")
    }

    fn expect_rank4(&self, a: NodeId, op: &'static str) -> Result<[usize; 4]> {
        let s = self.nodes[a].value.shape();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch { op, detail: format!("expected rank 4, got {:?}", s) });
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    pub fn channel_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.expect_rank4(a, "channel_sum")?;
        let x = self.nodes[a].value.data();
        let mut out = vec![0.0; c];
        let hw = h * w;
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let mut acc = 0.0;
                for k in 0..hw {
                    acc += x[base + k];
                }
                out[ch] += acc;
            }
        }
        self.push(Op::ChannelSum(a), Tensor::from_vec(out), "channel_sum")
    }

    pub fn channel_broadcast(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let s = self.nodes[a].value.shape().to_vec();
        if s.len() != 1 || shape.len() != 4 || shape[1] != s[0] {
            return Err(Error::ShapeMismatch { op: "channel_broadcast", detail: format!("{:?} -> {:?}", s, shape) });
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let x = self.nodes[a].value.data();
        let mut out = vec![0.0; n * c * hw];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                out[base..base + hw].fill(x[ch]);
            }
        }
        self.push(Op::ChannelBroadcast(a, shape.clone()), Tensor::new(shape, out)?, "channel_broadcast")
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let v = conv2d_forward(&self.nodes[x].value, &self.nodes[w].value)?;
        self.push(Op::Conv2d(x, w), v, "conv2d")
    }

    fn conv_igrad(&mut self, gy: NodeId, w: NodeId) -> Result<NodeId> {
        let v = conv2d_input_grad(&self.nodes[gy].value, &self.nodes[w].value)?;
        self.push(Op::ConvIGrad(gy, w), v, "conv_igrad")
    }

    fn conv_wgrad(&mut self, x: NodeId, gy: NodeId) -> Result<NodeId> {
        let v = conv2d_weight_grad(&self.nodes[x].value, &self.nodes[gy].value)?;
        self.push(Op::ConvWGrad(x, gy), v, "conv_wgrad")
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.pool_select(x, x)
    }

    fn pool_select(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let val = pool_select(&self.nodes[x].value, &self.nodes[v].value)?;
        self.push(Op::PoolSelect(x, v), val, "pool_select")
    }

    fn pool_scatter(&mut self, x: NodeId, g: NodeId) -> Result<NodeId> {
        let val = pool_scatter(&self.nodes[x].value, &self.nodes[g].value)?;
        self.push(Op::PoolScatter(x, g), val, "pool_scatter")
    }

    // ---- composites ----------------------------------------------------

    /// `x + b` with `b` a per-column bias vector, x: [N,D].
    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, _) = self.expect_rank2(x, "bias_add")?;
        let bb = self.broadcast_axis0(b, n)?;
        self.add(x, bb)
    }

    /// Per-channel bias on a [N,C,H,W] tensor.
    pub fn channel_bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x].value.shape().to_vec();
        let bb = self.channel_broadcast(b, shape)?;
        self.add(x, bb)
    }

    /// Batch-statistics normalization over batch and spatial dims, per channel,
    /// followed by per-channel scale and shift.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let [n, _c, h, w] = self.expect_rank4(x, "batch_norm")?;
        let shape = self.nodes[x].value.shape().to_vec();
        let count = (n * h * w) as f64;
        let sum = self.channel_sum(x)?;
        let mean = self.scale(sum, 1.0 / count)?;
        let mean_b = self.channel_broadcast(mean, shape.clone())?;
        let centered = self.sub(x, mean_b)?;
        let sq = self.mul(centered, centered)?;
        let var_sum = self.channel_sum(sq)?;
        let var = self.scale(var_sum, 1.0 / count)?;
        let var_eps = self.add_scalar(var, eps)?;
        let std = self.sqrt(var_eps)?;
        let std_b = self.channel_broadcast(std, shape.clone())?;
        let normed = self.div(centered, std_b)?;
        let gamma_b = self.channel_broadcast(gamma, shape.clone())?;
        let beta_b = self.channel_broadcast(beta, shape)?;
        let scaled = self.mul(normed, gamma_b)?;
        self.add(scaled, beta_b)
    }

    /// Numerically stable log-softmax, [N,C] -> [N,C].
    pub fn log_softmax(&mut self, logits: NodeId) -> Result<NodeId> {
        let (_, c) = self.expect_rank2(logits, "log_softmax")?;
        let m = self.row_max(logits)?;
        let m = self.detach(m)?;
        let m_b = self.broadcast_axis1(m, c)?;
        let z = self.sub(logits, m_b)?;
        let e = self.exp(z)?;
        let se = self.sum_axis1(e)?;
        let lse = self.ln(se)?;
        let lse_b = self.broadcast_axis1(lse, c)?;
        self.sub(z, lse_b)
    }

    /// Mean cross-entropy of integer labels against logits [N,C].
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ls = self.log_softmax(logits)?;
        let picked = self.gather_cols(ls, Rc::new(labels.to_vec()))?;
        let s = self.mean_all(picked)?;
        self.neg(s)
    }

    /// Mean squared error between same-shaped tensors.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    /// Row-wise L2 normalization of [N,D].
    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, d) = self.expect_rank2(x, "row_normalize")?;
        let sq = self.mul(x, x)?;
        let ss = self.sum_axis1(sq)?;
        // dead-feature rows have zero norm; eps keeps the division finite
        let eps = self.constant(Tensor::full(vec![n], 1e-12))?;
        let ss = self.add(ss, eps)?;
        let norm = self.sqrt(ss)?;
        let norm_b = self.broadcast_axis1(norm, d)?;
        self.div(x, norm_b)
    }

    /// Pairwise cosine similarity between rows of a [N,D] and b [M,D] -> [N,M].
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let an = self.row_normalize(a)?;
        let bn = self.row_normalize(b)?;
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    /// Softmax over axis 1 of [N,D].
    pub fn softmax_axis1(&mut self, x: NodeId) -> Result<NodeId> {
        let ls = self.log_softmax(x)?;
        self.exp(ls)
    }

    // ---- differentiation -----------------------------------------------

    /// Reverse-mode gradients of scalar `loss` w.r.t. the given nodes.
    ///
    /// The backward pass is recorded on the tape, so the returned node ids
    /// can themselves be differentiated.
    pub fn grad(&mut self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::NotScalar(loss));
        }
        // needs[i]: node i depends on some wrt node
        let mut needs = vec![false; loss + 1];
        for &w in wrt {
            if w <= loss {
                needs[w] = true;
            }
        }
        for i in 0..=loss {
            if !needs[i] {
                let inputs = op_inputs(&self.nodes[i].op);
                if inputs.iter().any(|&j| needs[j]) {
                    needs[i] = true;
                }
            }
        }
        let mut adjoint: Vec<Option<NodeId>> = vec![None; loss + 1];
        if needs[loss] {
            adjoint[loss] = Some(self.scalar(1.0)?);
        }
        for i in (0..=loss).rev() {
            let g = match adjoint[i] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            let contribs = self.backward_op(i, &op, g)?;
            for (input, contrib) in contribs {
                if !needs[input] {
                    continue;
                }
                adjoint[input] = Some(match adjoint[input] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }
        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match adjoint.get(w).copied().flatten() {
                Some(g) => out.push(g),
                None => {
                    let z = Tensor::zeros(self.nodes[w].value.shape().to_vec());
                    out.push(self.leaf(z)?);
                }
            }
        }
        Ok(out)
    }

    /// Gradient contributions of node `nid` (with op `op` and cotangent `g`)
    /// to each of its inputs.
    fn backward_op(&mut self, nid: NodeId, op: &Op, g: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        Ok(match *op {
            Op::Leaf | Op::ReluMask(_) | Op::RowMax(_) | Op::Detach(_) => vec![],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => {
                let nb = self.neg(g)?;
                vec![(a, g), (b, nb)]
            }
            Op::Mul(a, b) => {
                let ga = self.mul(g, b)?;
                let gb = self.mul(g, a)?;
                vec![(a, ga), (b, gb)]
            }
            Op::Div(a, b) => {
                let ga = self.div(g, b)?;
                let gy = self.mul(g, nid)?;
                let gb0 = self.div(gy, b)?;
                let gb = self.neg(gb0)?;
                vec![(a, ga), (b, gb)]
            }
            Op::Neg(a) => {
                let ga = self.neg(g)?;
                vec![(a, ga)]
            }
            Op::Exp(a) => {
                let ga = self.mul(g, nid)?;
                vec![(a, ga)]
            }
            Op::Ln(a) => {
                let ga = self.div(g, a)?;
                vec![(a, ga)]
            }
            Op::Sqrt(a) => {
                let h = self.scale(g, 0.5)?;
                let ga = self.div(h, nid)?;
                vec![(a, ga)]
            }
            Op::Relu(a) => {
                let m = self.relu_mask(a)?;
                let ga = self.mul(g, m)?;
                vec![(a, ga)]
            }
            Op::Scale(a, s) => {
                let ga = self.scale(g, s)?;
                vec![(a, ga)]
            }
            Op::AddScalar(a, _) => vec![(a, g)],
            Op::Reshape(a, _) => {
                let shape = self.nodes[a].value.shape().to_vec();
                let ga = self.reshape(g, shape)?;
                vec![(a, ga)]
            }
            Op::MatMul(a, b) => {
                let bt = self.transpose(b)?;
                let ga = self.matmul(g, bt)?;
                let at = self.transpose(a)?;
                let gb = self.matmul(at, g)?;
                vec![(a, ga), (b, gb)]
            }
            Op::Transpose(a) => {
                let ga = self.transpose(g)?;
                vec![(a, ga)]
            }
            Op::SumAll(a) => {
                let shape = self.nodes[a].value.shape().to_vec();
                let ga = self.broadcast_scalar(g, shape)?;
                vec![(a, ga)]
            }
            Op::BroadcastScalar(a, _) => {
                let ga = self.sum_all(g)?;
                vec![(a, ga)]
            }
            Op::SumAxis0(a) => {
                let n = self.nodes[a].value.shape()[0];
                let ga = self.broadcast_axis0(g, n)?;
                vec![(a, ga)]
            }
            Op::BroadcastAxis0(a, _) => {
                let ga = self.sum_axis0(g)?;
                vec![(a, ga)]
            }
            Op::SumAxis1(a) => {
                let d = self.nodes[a].value.shape()[1];
                let ga = self.broadcast_axis1(g, d)?;
                vec![(a, ga)]
            }
            Op::BroadcastAxis1(a, _) => {
                let ga = self.sum_axis1(g)?;
                vec![(a, ga)]
            }
            Op::GatherCols(a, ref idx) => {
                let d = self.nodes[a].value.shape()[1];
                let ga = self.scatter_cols(g, idx.clone(), d)?;
                vec![(a, ga)]
            }
            Op::ScatterCols(a, ref idx, _) => {
                let ga = self.gather_cols(g, idx.clone())?;
                vec![(a, ga)]
            }
            Op::ChannelSum(a) => {
                let shape = self.nodes[a].value.shape().to_vec();
                let ga = self.channel_broadcast(g, shape)?;
                vec![(a, ga)]
            }
            Op::ChannelBroadcast(a, _) => {
                let ga = self.channel_sum(g)?;
                vec![(a, ga)]
            }
            Op::Conv2d(x, w) => {
                let gx = self.conv_igrad(g, w)?;
                let gw = self.conv_wgrad(x, g)?;
                vec![(x, gx), (w, gw)]
            }
            Op::ConvIGrad(a, w) => {
                // y = C_x^T(a; w): linear in a and w
                let ga = self.conv2d(g, w)?;
                let gw = self.conv_wgrad(g, a)?;
                vec![(a, ga), (w, gw)]
            }
            Op::ConvWGrad(x, a) => {
                // y = C_w^T(a; x): linear in x and a
                let gx = self.conv_igrad(a, g)?;
                let ga = self.conv2d(x, g)?;
                vec![(x, gx), (a, ga)]
            }
            Op::PoolSelect(x, v) => {
                let gv = self.pool_scatter(x, g)?;
                vec![(v, gv)]
            }
            Op::PoolScatter(x, a) => {
                let ga = self.pool_select(x, g)?;
                vec![(a, ga)]
            }
        })
    }

    /// Recompute every non-leaf node from its inputs and verify the recorded
    /// values are reproduced exactly.
    pub fn verify_replay(&self) -> bool {
        let mut tape = Tape::new();
        for node in &self.nodes {
            let id = match &node.op {
                Op::Leaf => tape.leaf(node.value.clone()),
                op => tape.replay_op(&op.clone()),
            };
            match id {
                Ok(id) => {
                    if tape.nodes[id].value != node.value {
                        return false;
                    }
                }
                Err(_) => return false,
            }
        }
        true
    }

    fn replay_op(&mut self, op: &Op) -> Result<NodeId> {
        match *op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => self.add(a, b),
            Op::Sub(a, b) => self.sub(a, b),
            Op::Mul(a, b) => self.mul(a, b),
            Op::Div(a, b) => self.div(a, b),
            Op::Neg(a) => self.neg(a),
            Op::Exp(a) => self.exp(a),
            Op::Ln(a) => self.ln(a),
            Op::Sqrt(a) => self.sqrt(a),
            Op::Relu(a) => self.relu(a),
            Op::ReluMask(a) => self.relu_mask(a),
            Op::Scale(a, s) => self.scale(a, s),
            Op::AddScalar(a, s) => self.add_scalar(a, s),
            Op::Detach(a) => self.detach(a),
            Op::Reshape(a, ref s) => self.reshape(a, s.clone()),
            Op::MatMul(a, b) => self.matmul(a, b),
            Op::Transpose(a) => self.transpose(a),
            Op::SumAll(a) => self.sum_all(a),
            Op::BroadcastScalar(a, ref s) => self.broadcast_scalar(a, s.clone()),
            Op::SumAxis0(a) => self.sum_axis0(a),
            Op::BroadcastAxis0(a, n) => self.broadcast_axis0(a, n),
            Op::SumAxis1(a) => self.sum_axis1(a),
            Op::BroadcastAxis1(a, d) => self.broadcast_axis1(a, d),
            Op::RowMax(a) => self.row_max(a),
            Op::GatherCols(a, ref idx) => self.gather_cols(a, idx.clone()),
            Op::ScatterCols(a, ref idx, d) => self.scatter_cols(a, idx.clone(), d),
            Op::ChannelSum(a) => self.channel_sum(a),
            Op::ChannelBroadcast(a, ref s) => self.channel_broadcast(a, s.clone()),
            Op::Conv2d(x, w) => self.conv2d(x, w),
            Op::ConvIGrad(a, w) => self.conv_igrad(a, w),
            Op::ConvWGrad(x, a) => self.conv_wgrad(x, a),
            Op::PoolSelect(x, v) => self.pool_select(x, v),
            Op::PoolScatter(x, a) => self.pool_scatter(x, a),
        }
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match *op {
        Op::Leaf => vec![],
        Op::Neg(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Sqrt(a)
        | Op::Relu(a)
        | Op::ReluMask(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a, _)
        | Op::Detach(a)
        | Op::Reshape(a, _)
        | Op::Transpose(a)
        | Op::SumAll(a)
        | Op::BroadcastScalar(a, _)
        | Op::SumAxis0(a)
        | Op::BroadcastAxis0(a, _)
        | Op::SumAxis1(a)
        | Op::BroadcastAxis1(a, _)
        | Op::RowMax(a)
        | Op::GatherCols(a, _)
        | Op::ScatterCols(a, _, _)
        | Op::ChannelSum(a)
        | Op::ChannelBroadcast(a, _) => vec![a],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::MatMul(a, b)
        | Op::Conv2d(a, b)
        | Op::ConvIGrad(a, b)
        | Op::ConvWGrad(a, b)
        | Op::PoolSelect(a, b)
        | Op::PoolScatter(a, b) => vec![a, b],
    }
}

// ---- convolution / pooling kernels (3x3, stride 1, pad 1; pool 2x2/2) -----

fn conv2d_forward(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || xs[1] != ws[1] {
        return Err(Error::ShapeMismatch { op: "conv2d", detail: format!("x {:?} w {:?}", xs, ws) });
    }
    let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let co = ws[0];
    let mut out = Tensor::zeros(vec![n, co, h, wd]);
    let xd = x.data();
    let wdata = w.data();
    let od = out.data_mut();
    for b in 0..n {
        for oc in 0..co {
            for ic in 0..ci {
                let wbase = ((oc * ci) + ic) * 9;
                let xbase = (b * ci + ic) * h * wd;
                let obase = (b * co + oc) * h * wd;
                for ku in 0..3usize {
                    for kv in 0..3usize {
                        let wv = wdata[wbase + ku * 3 + kv];
                        if wv == 0.0 {
                            continue;
                        }
                        // output (i,j) reads x (i+ku-1, j+kv-1)
                        let (i0, i1) = row_range(h, ku);
                        for i in i0..i1 {
                            let xi = i + ku - 1;
                            let (j0, j1) = row_range(wd, kv);
                            let orow = obase + i * wd;
                            let xrow = xbase + xi * wd;
                            for j in j0..j1 {
                                od[orow + j] += xd[xrow + j + kv - 1] * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Valid output-index range so that `idx + k - 1` stays within `0..len`.
fn row_range(len: usize, k: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { len - 1 } else { len };
    (lo, hi.max(lo))
}

fn conv2d_input_grad(gy: &Tensor, w: &Tensor) -> Result<Tensor> {
    let gs = gy.shape();
    let ws = w.shape();
    if gs.len() != 4 || ws.len() != 4 || gs[1] != ws[0] {
        return Err(Error::ShapeMismatch { op: "conv_igrad", detail: format!("gy {:?} w {:?}", gs, ws) });
    }
    let (n, co, h, wd) = (gs[0], gs[1], gs[2], gs[3]);
    let ci = ws[1];
    let mut out = Tensor::zeros(vec![n, ci, h, wd]);
    let gd = gy.data();
    let wdata = w.data();
    let od = out.data_mut();
    for b in 0..n {
        for oc in 0..co {
            for ic in 0..ci {
                let wbase = ((oc * ci) + ic) * 9;
                let gbase = (b * co + oc) * h * wd;
                let obase = (b * ci + ic) * h * wd;
                for ku in 0..3usize {
                    for kv in 0..3usize {
                        let wv = wdata[wbase + ku * 3 + kv];
                        if wv == 0.0 {
                            continue;
                        }
                        // dx[p,q] += gy[p-ku+1, q-kv+1] * w[ku,kv]
                        let (i0, i1) = row_range(h, 2 - ku);
                        let (j0, j1) = row_range(wd, 2 - kv);
                        for p in i0..i1 {
                            let gi = p + 1 - ku;
                            let orow = obase + p * wd;
                            let grow = gbase + gi * wd;
                            for q in j0..j1 {
                                od[orow + q] += gd[grow + q + 1 - kv] * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv2d_weight_grad(x: &Tensor, gy: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let gs = gy.shape();
    if xs.len() != 4 || gs.len() != 4 || xs[0] != gs[0] || xs[2] != gs[2] || xs[3] != gs[3] {
        return Err(Error::ShapeMismatch { op: "conv_wgrad", detail: format!("x {:?} gy {:?}", xs, gs) });
    }
    let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let co = gs[1];
    let mut out = Tensor::zeros(vec![co, ci, 3, 3]);
    let xd = x.data();
    let gd = gy.data();
    let od = out.data_mut();
    for b in 0..n {
        for oc in 0..co {
            for ic in 0..ci {
                let wbase = ((oc * ci) + ic) * 9;
                let xbase = (b * ci + ic) * h * wd;
                let gbase = (b * co + oc) * h * wd;
                for ku in 0..3usize {
                    for kv in 0..3usize {
                        let (i0, i1) = row_range(h, ku);
                        let (j0, j1) = row_range(wd, kv);
                        let mut acc = 0.0;
                        for i in i0..i1 {
                            let xrow = xbase + (i + ku - 1) * wd;
                            let grow = gbase + i * wd;
                            for j in j0..j1 {
                                acc += xd[xrow + j + kv - 1] * gd[grow + j];
                            }
                        }
                        od[wbase + ku * 3 + kv] += acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// First-maximum index (row-major scan) in each 2x2 window of `x`.
fn pool_argmax(x: &Tensor) -> Result<(Vec<usize>, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(Error::ShapeMismatch { op: "maxpool2", detail: format!("{:?}", s) });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + (2 * i) * w + 2 * j;
                    let mut bv = xd[best];
                    for (du, dv) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + du) * w + 2 * j + dv;
                        if xd[idx] > bv {
                            bv = xd[idx];
                            best = idx;
                        }
                    }
                    arg.push(best);
                }
            }
        }
    }
    Ok((arg, vec![n, c, oh, ow]))
}

fn pool_select(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    if x.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            op: "pool_select",
            detail: format!("{:?} vs {:?}", x.shape(), v.shape()),
        });
    }
    let (arg, oshape) = pool_argmax(x)?;
    let vd = v.data();
    let data: Vec<f64> = arg.iter().map(|&i| vd[i]).collect();
    Tensor::new(oshape, data)
}

fn pool_scatter(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (arg, oshape) = pool_argmax(x)?;
    if g.shape() != oshape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "pool_scatter",
            detail: format!("{:?} vs {:?}", g.shape(), oshape),
        });
    }
    let mut out = Tensor::zeros(x.shape().to_vec());
    let od = out.data_mut();
    for (k, &i) in arg.iter().enumerate() {
        od[i] += g.data()[k];
    }
    Ok(out)
}
