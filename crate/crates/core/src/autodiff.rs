//! Reverse-mode automatic differentiation on an eager tape.
//!
//! Every node's value is computed when the node is pushed. `backward`
//! produces cotangents that are themselves tape nodes built from the same
//! primitive set, so a scalar formed from first-order gradients can be
//! differentiated again. That second pass is what the attack loop relies
//! on: the gradient-matching loss is a function of parameter gradients,
//! and its own gradient with respect to pixels, latents, or intermediate
//! features falls out of a second `backward` call.
//!
//! The primitive set is closed under differentiation. The convolution
//! family is the interesting case: `Conv2d`, `ConvT2d` and `ConvWGrad`
//! are the three partial adjoints of one trilinear form, so each one's
//! VJPs are again members of the family.

use crate::tensor::TensorF;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    /// Differentiable leaf.
    Input,
    /// Non-differentiable leaf.
    Constant,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f32),
    AddScalar(f32),
    Recip,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Relu,
    LeakyRelu(f32),
    Sigmoid,
    Tanh,
    /// 1 where x > 0 else 0. Zero derivative; carries ReLU subgradients.
    GateGtZero,
    /// 1 where x > 0 else alpha. Zero derivative.
    LeakyGate(f32),
    /// sign(x) with sign(0) = 0. Zero derivative; carries |x| subgradients.
    SignConst,
    /// Row-wise max of [m, n] -> [m], treated as a constant shift
    /// (log-sum-exp is shift-invariant, so derivatives stay exact).
    RowMaxConst,
    MatMul,
    Transpose,
    SumAll,
    BroadcastScalar(Vec<usize>),
    SumAxis0,
    BroadcastAxis0(usize),
    SumAxis1,
    BroadcastAxis1(usize),
    Reshape(Vec<usize>),
    /// Tensor times a rank-0 node.
    ScaleBy,
    Conv2d { stride: usize, pad: usize },
    ConvT2d { stride: usize, pad: usize, out_hw: (usize, usize) },
    ConvWGrad { stride: usize, pad: usize, kernel_hw: (usize, usize) },
    ConcatCols,
    SliceCols { from: usize, len: usize },
    PadCols { from: usize, total: usize },
    SumChannels,
    BroadcastChannels { batch: usize, h: usize, w: usize },
    ConcatChannels,
    SliceChannels { from: usize, len: usize },
    PadChannels { from: usize, total: usize },
    /// Spatial window of a [B, C, H, W] tensor.
    Slice4 { h0: usize, h1: usize, w0: usize, w1: usize },
    /// Embed a [B, C, h, w] tensor into zeros of [B, C, H, W] at (h0, w0).
    PadEmbed4 { h0: usize, orig_h: usize, w0: usize, orig_w: usize },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: TensorF,
}

/// An eager computation tape.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &TensorF {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    pub fn scalar_value(&self, id: NodeId) -> f32 {
        self.nodes[id].value.item()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: TensorF) -> NodeId {
        self.push_raw(Op::Input, vec![], value)
    }

    pub fn constant(&mut self, value: TensorF) -> NodeId {
        self.push_raw(Op::Constant, vec![], value)
    }

    pub fn scalar_const(&mut self, v: f32) -> NodeId {
        self.constant(TensorF::scalar(v))
    }

    fn push_raw(&mut self, op: Op, inputs: Vec<NodeId>, value: TensorF) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        self.nodes.len() - 1
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        let value = self.eval(&op, &inputs);
        self.push_raw(op, inputs, value)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Neg, vec![a])
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        self.push(Op::Scale(c), vec![a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f32) -> NodeId {
        self.push(Op::AddScalar(c), vec![a])
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Recip, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp, vec![a])
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Ln, vec![a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sqrt, vec![a])
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Abs, vec![a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu, vec![a])
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f32) -> NodeId {
        self.push(Op::LeakyRelu(alpha), vec![a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid, vec![a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh, vec![a])
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose, vec![a])
    }

    // ---- reductions and broadcasts ----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll, vec![a])
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::BroadcastScalar(shape.to_vec()), vec![a])
    }

    pub fn sum_axis0(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAxis0, vec![a])
    }

    pub fn broadcast_axis0(&mut self, a: NodeId, rows: usize) -> NodeId {
        self.push(Op::BroadcastAxis0(rows), vec![a])
    }

    pub fn sum_axis1(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAxis1, vec![a])
    }

    pub fn broadcast_axis1(&mut self, a: NodeId, cols: usize) -> NodeId {
        self.push(Op::BroadcastAxis1(cols), vec![a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(shape.to_vec()), vec![a])
    }

    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        self.push(Op::ScaleBy, vec![a, s])
    }

    pub fn row_max_const(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowMaxConst, vec![a])
    }

    // ---- convolution family ----

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        self.push(Op::Conv2d { stride, pad }, vec![x, w])
    }

    pub fn conv2d_transpose(
        &mut self,
        y: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> NodeId {
        self.push(Op::ConvT2d { stride, pad, out_hw }, vec![y, w])
    }

    pub fn conv2d_wgrad(
        &mut self,
        x: NodeId,
        y: NodeId,
        stride: usize,
        pad: usize,
        kernel_hw: (usize, usize),
    ) -> NodeId {
        self.push(Op::ConvWGrad { stride, pad, kernel_hw }, vec![x, y])
    }

    // ---- structure ----

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatCols, vec![a, b])
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, len: usize) -> NodeId {
        self.push(Op::SliceCols { from, len }, vec![a])
    }

    pub fn sum_channels(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumChannels, vec![a])
    }

    pub fn broadcast_channels(&mut self, a: NodeId, batch: usize, h: usize, w: usize) -> NodeId {
        self.push(Op::BroadcastChannels { batch, h, w }, vec![a])
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatChannels, vec![a, b])
    }

    pub fn slice4(&mut self, a: NodeId, h0: usize, h1: usize, w0: usize, w1: usize) -> NodeId {
        self.push(Op::Slice4 { h0, h1, w0, w1 }, vec![a])
    }

    // ---- composites ----

    /// x · min(c / max(‖x‖₂, tiny), 1) over the whole tensor.
    pub fn clip_to_norm(&mut self, x: NodeId, bound: f32) -> NodeId {
        let sq = self.mul(x, x);
        let ss = self.sum_all(sq);
        let ss = self.add_scalar(ss, 1e-24);
        let norm = self.sqrt(ss);
        let inv = self.recip(norm);
        let ratio = self.scale(inv, bound);
        // min(ratio, 1) = 1 - relu(1 - ratio)
        let one_minus = self.add_scalar(ratio, -1.0);
        let neg = self.neg(one_minus);
        let r = self.relu(neg);
        let negr = self.neg(r);
        let s = self.add_scalar(negr, 1.0);
        self.scale_by(x, s)
    }

    /// Mean softmax cross-entropy of logits [B, L] against integer labels.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let shape = self.shape(logits).to_vec();
        assert_eq!(shape.len(), 2, "logits must be [B, L]");
        let (b, l) = (shape[0], shape[1]);
        assert_eq!(labels.len(), b);
        let rowmax = self.row_max_const(logits);
        let shift = self.broadcast_axis1(rowmax, l);
        let shifted = self.sub(logits, shift);
        let ex = self.exp(shifted);
        let sumex = self.sum_axis1(ex);
        let lnsum = self.ln(sumex);
        let lse = self.add(lnsum, rowmax);
        let onehot = self.constant(one_hot(labels, l));
        let picked_terms = self.mul(logits, onehot);
        let picked = self.sum_axis1(picked_terms);
        let per = self.sub(lse, picked);
        let total = self.sum_all(per);
        self.scale(total, 1.0 / b as f32)
    }

    /// log(1 + exp(x)), computed stably.
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let r = self.relu(x);
        let a = self.abs(x);
        let na = self.neg(a);
        let e = self.exp(na);
        let e1 = self.add_scalar(e, 1.0);
        let ln = self.ln(e1);
        self.add(r, ln)
    }

    /// Mean binary cross-entropy with logits against targets in {0, 1}.
    pub fn bce_with_logits_mean(&mut self, logits: NodeId, targets: &[f32]) -> NodeId {
        let n = self.value(logits).len();
        assert_eq!(n, targets.len());
        let sp = self.softplus(logits);
        let t = self.constant(
            TensorF::new(self.value(logits).shape().to_vec(), targets.to_vec()).unwrap(),
        );
        let tx = self.mul(t, logits);
        let per = self.sub(sp, tx);
        let total = self.sum_all(per);
        self.scale(total, 1.0 / n as f32)
    }

    // ---- differentiation ----

    /// Cotangents of a scalar `root` with respect to `wrt` nodes. The
    /// returned gradients are tape nodes, so they can be combined into new
    /// scalars and differentiated again.
    pub fn backward(&mut self, root: NodeId, wrt: &[NodeId]) -> Vec<NodeId> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut cot: Vec<Option<NodeId>> = vec![None; self.nodes.len()];
        cot[root] = Some(self.constant(TensorF::scalar(1.0)));
        for id in (0..=root).rev() {
            let g = match cot[id] {
                Some(g) => g,
                None => continue,
            };
            if matches!(self.nodes[id].op, Op::Input | Op::Constant) {
                continue;
            }
            for (input, contrib) in self.vjp(id, g) {
                cot[input] = Some(match cot[input] {
                    Some(existing) => self.add(existing, contrib),
                    None => contrib,
                });
            }
        }
        wrt.iter()
            .map(|&w| {
                cot[w].unwrap_or_else(|| {
                    let z = TensorF::zeros(self.value(w).shape());
                    self.constant(z)
                })
            })
            .collect()
    }

    /// Per-input cotangent contributions for one node.
    fn vjp(&mut self, id: NodeId, g: NodeId) -> Vec<(NodeId, NodeId)> {
        let op = self.nodes[id].op.clone();
        let inputs = self.nodes[id].inputs.clone();
        match op {
            Op::Input | Op::Constant => vec![],
            Op::Add => vec![(inputs[0], g), (inputs[1], g)],
            Op::Sub => {
                let ng = self.neg(g);
                vec![(inputs[0], g), (inputs[1], ng)]
            }
            Op::Mul => {
                let ga = self.mul(g, inputs[1]);
                let gb = self.mul(g, inputs[0]);
                vec![(inputs[0], ga), (inputs[1], gb)]
            }
            Op::Neg => {
                let ng = self.neg(g);
                vec![(inputs[0], ng)]
            }
            Op::Scale(c) => {
                let gs = self.scale(g, c);
                vec![(inputs[0], gs)]
            }
            Op::AddScalar(_) => vec![(inputs[0], g)],
            Op::Recip => {
                // d(1/x) = -y^2 dx
                let y2 = self.mul(id, id);
                let gy = self.mul(g, y2);
                let ng = self.neg(gy);
                vec![(inputs[0], ng)]
            }
            Op::Exp => {
                let ge = self.mul(g, id);
                vec![(inputs[0], ge)]
            }
            Op::Ln => {
                let inv = self.recip(inputs[0]);
                let gi = self.mul(g, inv);
                vec![(inputs[0], gi)]
            }
            Op::Sqrt => {
                // d(sqrt x) = g / (2 y)
                let inv = self.recip(id);
                let gi = self.mul(g, inv);
                let half = self.scale(gi, 0.5);
                vec![(inputs[0], half)]
            }
            Op::Abs => {
                let s = self.push(Op::SignConst, vec![inputs[0]]);
                let gs = self.mul(g, s);
                vec![(inputs[0], gs)]
            }
            Op::Relu => {
                let gate = self.push(Op::GateGtZero, vec![inputs[0]]);
                let gg = self.mul(g, gate);
                vec![(inputs[0], gg)]
            }
            Op::LeakyRelu(alpha) => {
                let gate = self.push(Op::LeakyGate(alpha), vec![inputs[0]]);
                let gg = self.mul(g, gate);
                vec![(inputs[0], gg)]
            }
            Op::Sigmoid => {
                // g * y * (1 - y)
                let ny = self.neg(id);
                let om = self.add_scalar(ny, 1.0);
                let yom = self.mul(id, om);
                let gs = self.mul(g, yom);
                vec![(inputs[0], gs)]
            }
            Op::Tanh => {
                let y2 = self.mul(id, id);
                let ny2 = self.neg(y2);
                let om = self.add_scalar(ny2, 1.0);
                let gt = self.mul(g, om);
                vec![(inputs[0], gt)]
            }
            Op::GateGtZero | Op::LeakyGate(_) | Op::SignConst | Op::RowMaxConst => vec![],
            Op::MatMul => {
                let bt = self.transpose(inputs[1]);
                let ga = self.matmul(g, bt);
                let at = self.transpose(inputs[0]);
                let gb = self.matmul(at, g);
                vec![(inputs[0], ga), (inputs[1], gb)]
            }
            Op::Transpose => {
                let gt = self.transpose(g);
                vec![(inputs[0], gt)]
            }
            Op::SumAll => {
                let shape = self.value(inputs[0]).shape().to_vec();
                let b = self.broadcast_scalar(g, &shape);
                vec![(inputs[0], b)]
            }
            Op::BroadcastScalar(_) => {
                let s = self.sum_all(g);
                vec![(inputs[0], s)]
            }
            Op::SumAxis0 => {
                let rows = self.value(inputs[0]).shape()[0];
                let b = self.broadcast_axis0(g, rows);
                vec![(inputs[0], b)]
            }
            Op::BroadcastAxis0(_) => {
                let s = self.sum_axis0(g);
                vec![(inputs[0], s)]
            }
            Op::SumAxis1 => {
                let cols = self.value(inputs[0]).shape()[1];
                let b = self.broadcast_axis1(g, cols);
                vec![(inputs[0], b)]
            }
            Op::BroadcastAxis1(_) => {
                let s = self.sum_axis1(g);
                vec![(inputs[0], s)]
            }
            Op::Reshape(_) => {
                let orig = self.value(inputs[0]).shape().to_vec();
                let r = self.reshape(g, &orig);
                vec![(inputs[0], r)]
            }
            Op::ScaleBy => {
                let gx = self.scale_by(g, inputs[1]);
                let prod = self.mul(g, inputs[0]);
                let gs = self.sum_all(prod);
                vec![(inputs[0], gx), (inputs[1], gs)]
            }
            Op::Conv2d { stride, pad } => {
                let x_shape = self.value(inputs[0]).shape().to_vec();
                let w_shape = self.value(inputs[1]).shape().to_vec();
                let gx =
                    self.conv2d_transpose(g, inputs[1], stride, pad, (x_shape[2], x_shape[3]));
                let gw = self.conv2d_wgrad(inputs[0], g, stride, pad, (w_shape[2], w_shape[3]));
                vec![(inputs[0], gx), (inputs[1], gw)]
            }
            Op::ConvT2d { stride, pad, .. } => {
                // Adjoint of the adjoint is the forward map.
                let w_shape = self.value(inputs[1]).shape().to_vec();
                let gy = self.conv2d(g, inputs[1], stride, pad);
                let gw = self.conv2d_wgrad(g, inputs[0], stride, pad, (w_shape[2], w_shape[3]));
                vec![(inputs[0], gy), (inputs[1], gw)]
            }
            Op::ConvWGrad { stride, pad, .. } => {
                let x_shape = self.value(inputs[0]).shape().to_vec();
                let gx = self.conv2d_transpose(inputs[1], g, stride, pad, (x_shape[2], x_shape[3]));
                let gy = self.conv2d(inputs[0], g, stride, pad);
                vec![(inputs[0], gx), (inputs[1], gy)]
            }
            Op::ConcatCols => {
                let k1 = self.value(inputs[0]).shape()[1];
                let k2 = self.value(inputs[1]).shape()[1];
                let ga = self.push(Op::SliceCols { from: 0, len: k1 }, vec![g]);
                let gb = self.push(Op::SliceCols { from: k1, len: k2 }, vec![g]);
                vec![(inputs[0], ga), (inputs[1], gb)]
            }
            Op::SliceCols { from, len } => {
                let total = self.value(inputs[0]).shape()[1];
                let _ = len;
                let p = self.push(Op::PadCols { from, total }, vec![g]);
                vec![(inputs[0], p)]
            }
            Op::PadCols { from, .. } => {
                let len = self.value(inputs[0]).shape()[1];
                let s = self.push(Op::SliceCols { from, len }, vec![g]);
                vec![(inputs[0], s)]
            }
            Op::SumChannels => {
                let shape = self.value(inputs[0]).shape().to_vec();
                let b = self.broadcast_channels(g, shape[0], shape[2], shape[3]);
                vec![(inputs[0], b)]
            }
            Op::BroadcastChannels { .. } => {
                let s = self.sum_channels(g);
                vec![(inputs[0], s)]
            }
            Op::ConcatChannels => {
                let c1 = self.value(inputs[0]).shape()[1];
                let c2 = self.value(inputs[1]).shape()[1];
                let ga = self.push(Op::SliceChannels { from: 0, len: c1 }, vec![g]);
                let gb = self.push(Op::SliceChannels { from: c1, len: c2 }, vec![g]);
                vec![(inputs[0], ga), (inputs[1], gb)]
            }
            Op::SliceChannels { from, .. } => {
                let total = self.value(inputs[0]).shape()[1];
                let p = self.push(Op::PadChannels { from, total }, vec![g]);
                vec![(inputs[0], p)]
            }
            Op::PadChannels { from, .. } => {
                let len = self.value(inputs[0]).shape()[1];
                let s = self.push(Op::SliceChannels { from, len }, vec![g]);
                vec![(inputs[0], s)]
            }
            Op::Slice4 { h0, w0, .. } => {
                let shape = self.value(inputs[0]).shape().to_vec();
                let p = self.push(
                    Op::PadEmbed4 { h0, orig_h: shape[2], w0, orig_w: shape[3] },
                    vec![g],
                );
                vec![(inputs[0], p)]
            }
            Op::PadEmbed4 { h0, w0, .. } => {
                let shape = self.value(inputs[0]).shape().to_vec();
                let s = self.slice4(g, h0, h0 + shape[2], w0, w0 + shape[3]);
                vec![(inputs[0], s)]
            }
        }
    }

    // ---- evaluation ----

    fn eval(&self, op: &Op, inputs: &[NodeId]) -> TensorF {
        let v = |i: usize| &self.nodes[inputs[i]].value;
        match op {
            Op::Input | Op::Constant => unreachable!("leaves carry their own value"),
            Op::Add => ew2(v(0), v(1), |a, b| a + b),
            Op::Sub => ew2(v(0), v(1), |a, b| a - b),
            Op::Mul => ew2(v(0), v(1), |a, b| a * b),
            Op::Neg => ew1(v(0), |a| -a),
            Op::Scale(c) => ew1(v(0), |a| a * c),
            Op::AddScalar(c) => ew1(v(0), |a| a + c),
            Op::Recip => ew1(v(0), |a| 1.0 / a),
            Op::Exp => ew1(v(0), |a| a.exp()),
            Op::Ln => ew1(v(0), |a| a.ln()),
            Op::Sqrt => ew1(v(0), |a| a.sqrt()),
            Op::Abs => ew1(v(0), |a| a.abs()),
            Op::Relu => ew1(v(0), |a| if a > 0.0 { a } else { 0.0 }),
            Op::LeakyRelu(alpha) => {
                let al = *alpha;
                ew1(v(0), move |a| if a > 0.0 { a } else { al * a })
            }
            Op::Sigmoid => ew1(v(0), |a| 1.0 / (1.0 + (-a).exp())),
            Op::Tanh => ew1(v(0), |a| a.tanh()),
            Op::GateGtZero => ew1(v(0), |a| if a > 0.0 { 1.0 } else { 0.0 }),
            Op::LeakyGate(alpha) => {
                let al = *alpha;
                ew1(v(0), move |a| if a > 0.0 { 1.0 } else { al })
            }
            Op::SignConst => ew1(v(0), |a| {
                if a > 0.0 {
                    1.0
                } else if a < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::RowMaxConst => {
                let x = v(0);
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let mut out = vec![f32::NEG_INFINITY; m];
                for i in 0..m {
                    for j in 0..n {
                        out[i] = out[i].max(x.data()[i * n + j]);
                    }
                }
                TensorF::new(vec![m], out).unwrap()
            }
            Op::MatMul => matmul(v(0), v(1)),
            Op::Transpose => {
                let x = v(0);
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = x.data()[i * n + j];
                    }
                }
                TensorF::new(vec![n, m], out).unwrap()
            }
            Op::SumAll => {
                let mut acc = 0.0_f64;
                for a in v(0).data() {
                    acc += *a as f64;
                }
                TensorF::scalar(acc as f32)
            }
            Op::BroadcastScalar(shape) => TensorF::full(shape, v(0).item()),
            Op::SumAxis0 => {
                let x = v(0);
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let mut out = vec![0.0_f64; n];
                for i in 0..m {
                    for j in 0..n {
                        out[j] += x.data()[i * n + j] as f64;
                    }
                }
                TensorF::new(vec![n], out.into_iter().map(|a| a as f32).collect()).unwrap()
            }
            Op::BroadcastAxis0(rows) => {
                let x = v(0);
                let n = x.len();
                let mut out = Vec::with_capacity(rows * n);
                for _ in 0..*rows {
                    out.extend_from_slice(x.data());
                }
                TensorF::new(vec![*rows, n], out).unwrap()
            }
            Op::SumAxis1 => {
                let x = v(0);
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let mut out = vec![0.0_f32; m];
                for i in 0..m {
                    let mut acc = 0.0_f64;
                    for j in 0..n {
                        acc += x.data()[i * n + j] as f64;
                    }
                    out[i] = acc as f32;
                }
                TensorF::new(vec![m], out).unwrap()
            }
            Op::BroadcastAxis1(cols) => {
                let x = v(0);
                let m = x.len();
                let mut out = Vec::with_capacity(m * cols);
                for i in 0..m {
                    for _ in 0..*cols {
                        out.push(x.data()[i]);
                    }
                }
                TensorF::new(vec![m, *cols], out).unwrap()
            }
            Op::Reshape(shape) => v(0).reshape(shape.clone()).expect("reshape size must match"),
            Op::ScaleBy => {
                let s = v(1).item();
                ew1(v(0), move |a| a * s)
            }
            Op::Conv2d { stride, pad } => conv2d(v(0), v(1), *stride, *pad),
            Op::ConvT2d { stride, pad, out_hw } => {
                conv2d_transpose(v(0), v(1), *stride, *pad, *out_hw)
            }
            Op::ConvWGrad { stride, pad, kernel_hw } => {
                conv2d_wgrad(v(0), v(1), *stride, *pad, *kernel_hw)
            }
            Op::ConcatCols => {
                let (a, b) = (v(0), v(1));
                let m = a.shape()[0];
                assert_eq!(m, b.shape()[0]);
                let (k1, k2) = (a.shape()[1], b.shape()[1]);
                let mut out = Vec::with_capacity(m * (k1 + k2));
                for i in 0..m {
                    out.extend_from_slice(&a.data()[i * k1..(i + 1) * k1]);
                    out.extend_from_slice(&b.data()[i * k2..(i + 1) * k2]);
                }
                TensorF::new(vec![m, k1 + k2], out).unwrap()
            }
            Op::SliceCols { from, len } => {
                let x = v(0);
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let mut out = Vec::with_capacity(m * len);
                for i in 0..m {
                    out.extend_from_slice(&x.data()[i * n + from..i * n + from + len]);
                }
                TensorF::new(vec![m, *len], out).unwrap()
            }
            Op::PadCols { from, total } => {
                let x = v(0);
                let (m, len) = (x.shape()[0], x.shape()[1]);
                let mut out = vec![0.0; m * total];
                for i in 0..m {
                    out[i * total + from..i * total + from + len]
                        .copy_from_slice(&x.data()[i * len..(i + 1) * len]);
                }
                TensorF::new(vec![m, *total], out).unwrap()
            }
            Op::SumChannels => {
                let x = v(0);
                let (b, c, h, w) = dims4(x);
                let hw = h * w;
                let mut out = vec![0.0_f64; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for k in 0..hw {
                            out[ci] += x.data()[base + k] as f64;
                        }
                    }
                }
                TensorF::new(vec![c], out.into_iter().map(|a| a as f32).collect()).unwrap()
            }
            Op::BroadcastChannels { batch, h, w } => {
                let x = v(0);
                let c = x.len();
                let hw = h * w;
                let mut out = Vec::with_capacity(batch * c * hw);
                for _ in 0..*batch {
                    for ci in 0..c {
                        for _ in 0..hw {
                            out.push(x.data()[ci]);
                        }
                    }
                }
                TensorF::new(vec![*batch, c, *h, *w], out).unwrap()
            }
            Op::ConcatChannels => {
                let (a, b) = (v(0), v(1));
                let (ba, ca, h, w) = dims4(a);
                let (bb, cb, hb, wb) = dims4(b);
                assert_eq!((ba, h, w), (bb, hb, wb));
                let hw = h * w;
                let mut out = Vec::with_capacity(ba * (ca + cb) * hw);
                for bi in 0..ba {
                    out.extend_from_slice(&a.data()[bi * ca * hw..(bi + 1) * ca * hw]);
                    out.extend_from_slice(&b.data()[bi * cb * hw..(bi + 1) * cb * hw]);
                }
                TensorF::new(vec![ba, ca + cb, h, w], out).unwrap()
            }
            Op::SliceChannels { from, len } => {
                let x = v(0);
                let (b, c, h, w) = dims4(x);
                let hw = h * w;
                let mut out = Vec::with_capacity(b * len * hw);
                for bi in 0..b {
                    let base = (bi * c + from) * hw;
                    out.extend_from_slice(&x.data()[base..base + len * hw]);
                }
                TensorF::new(vec![b, *len, h, w], out).unwrap()
            }
            Op::PadChannels { from, total } => {
                let x = v(0);
                let (b, len, h, w) = dims4(x);
                let hw = h * w;
                let mut out = vec![0.0; b * total * hw];
                for bi in 0..b {
                    let dst = (bi * total + from) * hw;
                    out[dst..dst + len * hw]
                        .copy_from_slice(&x.data()[bi * len * hw..(bi + 1) * len * hw]);
                }
                TensorF::new(vec![b, *total, h, w], out).unwrap()
            }
            Op::Slice4 { h0, h1, w0, w1 } => {
                let x = v(0);
                let (b, c, h, w) = dims4(x);
                let (oh, ow) = (h1 - h0, w1 - w0);
                let mut out = Vec::with_capacity(b * c * oh * ow);
                for bc in 0..b * c {
                    for i in *h0..*h1 {
                        let base = bc * h * w + i * w;
                        out.extend_from_slice(&x.data()[base + w0..base + w1]);
                    }
                }
                TensorF::new(vec![b, c, oh, ow], out).unwrap()
            }
            Op::PadEmbed4 { h0, orig_h, w0, orig_w } => {
                let x = v(0);
                let (b, c, h, w) = dims4(x);
                let mut out = vec![0.0; b * c * orig_h * orig_w];
                for bc in 0..b * c {
                    for i in 0..h {
                        let src = bc * h * w + i * w;
                        let dst = bc * orig_h * orig_w + (i + h0) * orig_w + w0;
                        out[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
                    }
                }
                TensorF::new(vec![b, c, *orig_h, *orig_w], out).unwrap()
            }
        }
    }
}

fn dims4(x: &TensorF) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected 4-D tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn ew1(x: &TensorF, f: impl Fn(f32) -> f32) -> TensorF {
    TensorF::new(x.shape().to_vec(), x.data().iter().map(|&a| f(a)).collect()).unwrap()
}

fn ew2(a: &TensorF, b: &TensorF, f: impl Fn(f32, f32) -> f32) -> TensorF {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    TensorF::new(a.shape().to_vec(), data).unwrap()
}

fn matmul(a: &TensorF, b: &TensorF) -> TensorF {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = vec![0.0_f32; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    TensorF::new(vec![m, n], out).unwrap()
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// y[b,o,i,j] = sum_{c,u,v} x[b,c,i*s+u-p,j*s+v-p] w[o,c,u,v]
fn conv2d(x: &TensorF, w: &TensorF, stride: usize, pad: usize) -> TensorF {
    let (b, ci, h, wd) = dims4(x);
    let (co, ci2, kh, kw) = dims4(w);
    assert_eq!(ci, ci2, "conv2d channel mismatch");
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let mut out = vec![0.0_f32; b * co * oh * ow];
    for bi in 0..b {
        for o in 0..co {
            let obase = (bi * co + o) * oh * ow;
            for c in 0..ci {
                let xbase = (bi * ci + c) * h * wd;
                for u in 0..kh {
                    for v in 0..kw {
                        let wv = w.data()[((o * ci + c) * kh + u) * kw + v];
                        if wv == 0.0 {
                            continue;
                        }
                        for i in 0..oh {
                            let xi = (i * stride + u) as isize - pad as isize;
                            if xi < 0 || xi >= h as isize {
                                continue;
                            }
                            let xrow = xbase + xi as usize * wd;
                            let orow = obase + i * ow;
                            for j in 0..ow {
                                let xj = (j * stride + v) as isize - pad as isize;
                                if xj < 0 || xj >= wd as isize {
                                    continue;
                                }
                                out[orow + j] += wv * x.data()[xrow + xj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    TensorF::new(vec![b, co, oh, ow], out).unwrap()
}

/// Adjoint of conv2d in its first slot: scatters y back through w.
fn conv2d_transpose(
    y: &TensorF,
    w: &TensorF,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
) -> TensorF {
    let (b, co, oh, ow) = dims4(y);
    let (co2, ci, kh, kw) = dims4(w);
    assert_eq!(co, co2, "conv2d_transpose channel mismatch");
    let (h, wd) = out_hw;
    let mut out = vec![0.0_f32; b * ci * h * wd];
    for bi in 0..b {
        for o in 0..co {
            let ybase = (bi * co + o) * oh * ow;
            for c in 0..ci {
                let obase = (bi * ci + c) * h * wd;
                for u in 0..kh {
                    for v in 0..kw {
                        let wv = w.data()[((o * ci + c) * kh + u) * kw + v];
                        if wv == 0.0 {
                            continue;
                        }
                        for i in 0..oh {
                            let xi = (i * stride + u) as isize - pad as isize;
                            if xi < 0 || xi >= h as isize {
                                continue;
                            }
                            let orow = obase + xi as usize * wd;
                            let yrow = ybase + i * ow;
                            for j in 0..ow {
                                let xj = (j * stride + v) as isize - pad as isize;
                                if xj < 0 || xj >= wd as isize {
                                    continue;
                                }
                                out[orow + xj as usize] += wv * y.data()[yrow + j];
                            }
                        }
                    }
                }
            }
        }
    }
    TensorF::new(vec![b, ci, h, wd], out).unwrap()
}

/// Adjoint of conv2d in its weight slot.
fn conv2d_wgrad(
    x: &TensorF,
    y: &TensorF,
    stride: usize,
    pad: usize,
    kernel_hw: (usize, usize),
) -> TensorF {
    let (b, ci, h, wd) = dims4(x);
    let (b2, co, oh, ow) = dims4(y);
    assert_eq!(b, b2, "conv2d_wgrad batch mismatch");
    let (kh, kw) = kernel_hw;
    let mut out = vec![0.0_f32; co * ci * kh * kw];
    for bi in 0..b {
        for o in 0..co {
            let ybase = (bi * co + o) * oh * ow;
            for c in 0..ci {
                let xbase = (bi * ci + c) * h * wd;
                for u in 0..kh {
                    for v in 0..kw {
                        let mut acc = 0.0_f32;
                        for i in 0..oh {
                            let xi = (i * stride + u) as isize - pad as isize;
                            if xi < 0 || xi >= h as isize {
                                continue;
                            }
                            let xrow = xbase + xi as usize * wd;
                            let yrow = ybase + i * ow;
                            for j in 0..ow {
                                let xj = (j * stride + v) as isize - pad as isize;
                                if xj < 0 || xj >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[xrow + xj as usize] * y.data()[yrow + j];
                            }
                        }
                        out[((o * ci + c) * kh + u) * kw + v] += acc;
                    }
                }
            }
        }
    }
    TensorF::new(vec![co, ci, kh, kw], out).unwrap()
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> TensorF {
    let mut data = vec![0.0_f32; labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        assert!(l < num_classes, "label {l} out of range [0, {num_classes})");
        data[i * num_classes + l] = 1.0;
    }
    TensorF::new(vec![labels.len(), num_classes], data).unwrap()
}

/// Gradient of a scalar loss functional with respect to a single input
/// tensor. Errors if the functional does not evaluate to a scalar.
pub fn input_gradient(
    f: impl FnOnce(&mut Graph, NodeId) -> NodeId,
    at: &TensorF,
) -> crate::Result<TensorF> {
    let mut g = Graph::new();
    let x = g.input(at.clone());
    let loss = f(&mut g, x);
    if g.value(loss).len() != 1 {
        return Err(crate::Error::InvalidArgument(format!(
            "loss functional must be scalar, got shape {:?}",
            g.shape(loss)
        )));
    }
    let grads = g.backward(loss, &[x]);
    Ok(g.value(grads[0]).clone())
}
