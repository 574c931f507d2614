//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape in strict reverse append order, so parents are always finalised
//! before they are visited. Broadcasting is limited to identical shapes or a
//! single-element operand; channel and position scaling have dedicated ops.

use std::collections::HashMap;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// tensor + single-element node
    AddScalar(NodeId, NodeId),
    /// tensor * single-element node
    MulScalar(NodeId, NodeId),
    /// a·x + b with constant a, b
    Affine(NodeId, f64),
    Sigmoid(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    Conv3x3 {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        dims: ConvDims,
    },
    AvgPoolSpatial(NodeId),
    AvgPoolChannel(NodeId),
    /// x[H,W,C] * w[C]
    ScaleChannels(NodeId, NodeId),
    /// x[H,W,C] * s[H,W]
    ScalePositions(NodeId, NodeId),
    /// x[N,M] + b[M]
    AddRowBias(NodeId, NodeId),
    Reshape(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatLast(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    FocalLoss {
        logits: NodeId,
        targets: Vec<f64>,
        gamma: f64,
        alpha: Option<f64>,
    },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            AddScalar(a, b) | MulScalar(a, b) => vec![*a, *b],
            ScaleChannels(a, b) | ScalePositions(a, b) | AddRowBias(a, b) => vec![*a, *b],
            Affine(a, _) | Sigmoid(a) | Relu(a) | SoftmaxRows(a) => vec![*a],
            AvgPoolSpatial(a) | AvgPoolChannel(a) | Reshape(a) | Sum(a) | Mean(a) => vec![*a],
            SliceRows { x, .. } => vec![*x],
            Conv3x3 {
                x, kernel, bias, ..
            } => vec![*x, *kernel, *bias],
            ConcatRows(v) | ConcatLast(v) => v.clone(),
            FocalLoss { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation record for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<String, NodeId>,
    param_order: Vec<String>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
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

/// log σ(x), stable for large |x|.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Per-element focal loss and its derivative w.r.t. the logit.
///
/// With p_t = σ(s·x), s = ±1 for y = 1/0:
///   L  = -α_t (1-p_t)^γ log p_t
///   dL/dx = α_t s (1-p_t)^γ (γ p_t log p_t - (1-p_t))
pub(crate) fn focal_element(x: f64, y: f64, gamma: f64, alpha: Option<f64>) -> (f64, f64) {
    let s = if y > 0.5 { 1.0 } else { -1.0 };
    let alpha_t = match alpha {
        Some(a) => {
            if y > 0.5 {
                a
            } else {
                1.0 - a
            }
        }
        None => 1.0,
    };
    let z = s * x;
    let p_t = sigmoid(z);
    let log_p = log_sigmoid(z);
    // 1 - p_t = σ(-z), computed directly to avoid cancellation.
    let q = sigmoid(-z);
    let mod_factor = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let loss = -alpha_t * mod_factor * log_p;
    let dx = alpha_t * s * mod_factor * (gamma * p_t * log_p - q);
    (loss, dx)
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<NodeId> {
        check_finite(name, &value)?;
        Ok(self.push(value, op))
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A named trainable leaf. Repeated requests for the same name return
    /// the same node, so gradients from every consumer accumulate in one place.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.variable(value.clone());
        self.params.insert(name.to_string(), id);
        self.param_order.push(name.to_string());
        id
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    /// Registered parameter names in registration order.
    pub fn param_names(&self) -> &[String] {
        &self.param_order
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        match *self.shape(id) {
            [m, n] => Ok((m, n)),
            ref s => Err(dim_err(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    fn hwc(&self, op: &'static str, id: NodeId) -> Result<(usize, usize, usize)> {
        match *self.shape(id) {
            [h, w, c] => Ok((h, w, c)),
            ref s => Err(dim_err(op, format!("expected H×W×C, got {s:?}"))),
        }
    }

    fn scalar_operand(&self, op: &'static str, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.len() != 1 {
            return Err(dim_err(op, format!("expected single element, got {:?}", v.shape())));
        }
        Ok(v.data()[0])
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(dim_err("matmul", format!("inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push_checked("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    /// a[M×K] · b[N×K]ᵀ without materialising the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix_dims("matmul_nt", a)?;
        let (n, k2) = self.matrix_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(dim_err("matmul_nt", format!("inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push_checked("matmul_nt", Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.same_shape(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push_checked(name, out, op)
    }

    /// Elementwise sum; a single-element operand broadcasts.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            if self.value(b).len() == 1 {
                return self.add_scalar(a, b);
            }
            if self.value(a).len() == 1 {
                return self.add_scalar(b, a);
            }
        }
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product; a single-element operand broadcasts.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            if self.value(b).len() == 1 {
                return self.mul_scalar(a, b);
            }
            if self.value(a).len() == 1 {
                return self.mul_scalar(b, a);
            }
        }
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn add_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.scalar_operand("add", s)?;
        let out = self.value(x).map(|v| v + sv);
        self.push_checked("add", out, Op::AddScalar(x, s))
    }

    fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.scalar_operand("mul", s)?;
        let out = self.value(x).map(|v| v * sv);
        self.push_checked("mul", out, Op::MulScalar(x, s))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.affine(x, factor, 0.0)
    }

    /// `factor * x + offset` with constant coefficients.
    pub fn affine(&mut self, x: NodeId, factor: f64, offset: f64) -> Result<NodeId> {
        let out = self.value(x).map(|v| factor * v + offset);
        self.push_checked("affine", out, Op::Affine(x, factor))
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: NodeId) -> Result<NodeId> {
        self.affine(x, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(sigmoid);
        self.push_checked("sigmoid", out, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push_checked("relu", out, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.matrix_dims("softmax_rows", x)?;
        let mut out = vec![0.0; m * n];
        kernels::softmax_rows(self.value(x).data(), &mut out, n);
        self.push_checked("softmax_rows", Tensor::from_parts(vec![m, n], out), Op::SoftmaxRows(x))
    }

    /// 3×3 convolution, stride 1, zero padding 1.
    /// x: H×W×Cin, kernel: 3×3×Cin×Cout, bias: Cout.
    pub fn conv3x3(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (h, w, cin) = self.hwc("conv3x3", x)?;
        let (kcin, cout) = match *self.shape(kernel) {
            [3, 3, a, b] => (a, b),
            ref s => return Err(dim_err("conv3x3", format!("kernel must be 3×3×Cin×Cout, got {s:?}"))),
        };
        if kcin != cin {
            return Err(dim_err("conv3x3", format!("input has {cin} channels, kernel expects {kcin}")));
        }
        if self.shape(bias) != [cout] {
            return Err(dim_err("conv3x3", format!("bias {:?} for {cout} outputs", self.shape(bias))));
        }
        let dims = ConvDims { h, w, cin, cout };
        let mut out = vec![0.0; h * w * cout];
        kernels::conv3x3_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &mut out,
            dims,
        );
        self.push_checked(
            "conv3x3",
            Tensor::from_parts(vec![h, w, cout], out),
            Op::Conv3x3 {
                x,
                kernel,
                bias,
                dims,
            },
        )
    }

    /// H×W×C → C, mean over all positions.
    pub fn avgpool_spatial(&mut self, x: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.hwc("avgpool_spatial", x)?;
        let mut out = vec![0.0; c];
        for px in self.value(x).data().chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(px) {
                *o += v;
            }
        }
        let inv = 1.0 / (h * w) as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push_checked("avgpool_spatial", Tensor::from_parts(vec![c], out), Op::AvgPoolSpatial(x))
    }

    /// H×W×C → H×W, mean over channels.
    pub fn avgpool_channel(&mut self, x: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.hwc("avgpool_channel", x)?;
        let inv = 1.0 / c as f64;
        let out = self
            .value(x)
            .data()
            .chunks_exact(c)
            .map(|px| px.iter().sum::<f64>() * inv)
            .collect();
        self.push_checked("avgpool_channel", Tensor::from_parts(vec![h, w], out), Op::AvgPoolChannel(x))
    }

    /// Channel-wise broadcast product: x[H,W,C] * w[C].
    pub fn scale_channels(&mut self, x: NodeId, weights: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.hwc("scale_channels", x)?;
        if self.shape(weights) != [c] {
            return Err(dim_err("scale_channels", format!("weights {:?} for {c} channels", self.shape(weights))));
        }
        let wv = self.value(weights).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for px in out.chunks_exact_mut(c) {
            for (o, &g) in px.iter_mut().zip(&wv) {
                *o *= g;
            }
        }
        self.push_checked(
            "scale_channels",
            Tensor::from_parts(vec![h, w, c], out),
            Op::ScaleChannels(x, weights),
        )
    }

    /// Position-wise broadcast product: x[H,W,C] * s[H,W].
    pub fn scale_positions(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.hwc("scale_positions", x)?;
        if self.shape(gate) != [h, w] {
            return Err(dim_err("scale_positions", format!("gate {:?} for {h}×{w} grid", self.shape(gate))));
        }
        let sv = self.value(gate).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (px, &s) in out.chunks_exact_mut(c).zip(&sv) {
            px.iter_mut().for_each(|o| *o *= s);
        }
        self.push_checked(
            "scale_positions",
            Tensor::from_parts(vec![h, w, c], out),
            Op::ScalePositions(x, gate),
        )
    }

    /// x[N,M] + b[M] on every row.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, m) = self.matrix_dims("add_row_bias", x)?;
        if self.shape(bias) != [m] {
            return Err(dim_err("add_row_bias", format!("bias {:?} for {m} columns", self.shape(bias))));
        }
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(m) {
            for (o, &b) in row.iter_mut().zip(&bv) {
                *o += b;
            }
        }
        self.push_checked("add_row_bias", Tensor::from_parts(vec![n, m], out), Op::AddRowBias(x, bias))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).reshape(shape).map_err(|_| {
            dim_err("reshape", format!("{:?} -> {shape:?}", self.shape(x)))
        })?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Concatenates along the first axis. Trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| dim_err("concat_rows", "no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(dim_err("concat_rows", format!("{s:?} vs trailing {tail:?}")));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(Tensor::from_parts(shape, data), Op::ConcatRows(parts.to_vec())))
    }

    /// Concatenates along the last axis. Leading extents must agree.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| dim_err("concat_last", "no inputs"))?;
        let s0 = self.shape(first);
        let lead = s0[..s0.len() - 1].to_vec();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                if s[..s.len() - 1] != lead[..] {
                    Err(dim_err("concat_last", format!("{s:?} vs leading {lead:?}")))
                } else {
                    Ok(s[s.len() - 1])
                }
            })
            .collect::<Result<_>>()?;
        let total: usize = widths.iter().sum();
        let outer: usize = lead.iter().product();
        let mut data = Vec::with_capacity(outer * total);
        for r in 0..outer {
            for (&p, &wd) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Tensor::from_parts(shape, data), Op::ConcatLast(parts.to_vec())))
    }

    /// Rows `start..start+len` of the first axis.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(dim_err("slice_rows", format!("rows {start}..{} of {}", start + len, s[0])));
        }
        let row: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut shape = s;
        shape[0] = len;
        Ok(self.push(Tensor::from_parts(shape, data), Op::SliceRows { x, start }))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).sum();
        self.push_checked("sum", Tensor::scalar(v), Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let v = t.sum() / t.len() as f64;
        self.push_checked("mean", Tensor::scalar(v), Op::Mean(x))
    }

    /// Mean sigmoid focal loss over all elements of `logits` against binary
    /// `targets` of the same shape. `alpha = None` disables class balancing.
    pub fn focal_loss(
        &mut self,
        logits: NodeId,
        targets: &Tensor,
        gamma: f64,
        alpha: Option<f64>,
    ) -> Result<NodeId> {
        if self.shape(logits) != targets.shape() {
            return Err(dim_err(
                "focal_loss",
                format!("logits {:?} vs targets {:?}", self.shape(logits), targets.shape()),
            ));
        }
        if targets.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Input("focal_loss targets must be binary".into()));
        }
        if !(gamma >= 0.0) {
            return Err(Error::Input(format!("focal gamma must be >= 0, got {gamma}")));
        }
        if let Some(a) = alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Input(format!("focal alpha must be in [0,1], got {a}")));
            }
        }
        let lv = self.value(logits);
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| focal_element(x, y, gamma, alpha).0)
            .sum();
        let v = total / lv.len() as f64;
        self.push_checked(
            "focal_loss",
            Tensor::scalar(v),
            Op::FocalLoss {
                logits,
                targets: targets.data().to_vec(),
                gamma,
                alpha,
            },
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a single-element `root`. Gradients from previous
    /// calls are discarded.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(dim_err("backward", format!("root must be scalar, got {:?}", self.shape(root))));
        }
        let n = self.nodes.len();
        self.grads = vec![None; n];
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contrib: Vec<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Lazily allocated gradient buffer for `id`, or `None` if `id` does not
    /// need a gradient.
    fn grad_buf(&mut self, id: NodeId) -> Option<&mut Vec<f64>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let len = self.nodes[id.0].value.len();
        Some(self.grads[id.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt_acc(g, self.value(b).data(), &mut da, m, n, k);
                    self.accumulate(a, da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn_acc(self.value(a).data(), g, &mut db, m, k, n);
                    self.accumulate(b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_acc(g, self.value(b).data(), &mut da, m, n, k);
                    self.accumulate(a, da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; n * k];
                    kernels::matmul_tn_acc(g, self.value(a).data(), &mut db, m, n, k);
                    self.accumulate(b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let d = g.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(a, d);
                }
                if self.needs(b) {
                    let d = g.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(b, d);
                }
            }
            Op::AddScalar(x, s) => {
                self.accumulate(x, g.to_vec());
                self.accumulate(s, vec![g.iter().sum()]);
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(s).data()[0];
                if self.needs(x) {
                    self.accumulate(x, g.iter().map(|v| v * sv).collect());
                }
                if self.needs(s) {
                    let d = g.iter().zip(self.value(x).data()).map(|(a, b)| a * b).sum();
                    self.accumulate(s, vec![d]);
                }
            }
            Op::Affine(x, factor) => {
                self.accumulate(x, g.iter().map(|v| v * factor).collect());
            }
            Op::Sigmoid(x) => {
                let out = &self.nodes[i].value;
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, &s)| gv * s * (1.0 - s))
                    .collect();
                self.accumulate(x, d);
            }
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(x, d);
            }
            Op::SoftmaxRows(x) => {
                // dx = y ⊙ (g - <g, y>) per row
                let y = &self.nodes[i].value;
                let n = y.shape()[1];
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks_exact(n)
                    .zip(g.chunks_exact(n))
                    .zip(d.chunks_exact_mut(n))
                {
                    let inner = kernels::dot(yr, gr);
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - inner);
                    }
                }
                self.accumulate(x, d);
            }
            Op::Conv3x3 {
                x,
                kernel,
                bias,
                dims,
            } => {
                let xv = self.value(x).data().to_vec();
                let kv = self.value(kernel).data().to_vec();
                let mut gx = self.needs(x).then(|| vec![0.0; xv.len()]);
                let mut gk = self.needs(kernel).then(|| vec![0.0; kv.len()]);
                let mut gb = self.needs(bias).then(|| vec![0.0; dims.cout]);
                kernels::conv3x3_backward(
                    &xv,
                    &kv,
                    g,
                    gx.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                    dims,
                );
                if let Some(d) = gx {
                    self.accumulate(x, d);
                }
                if let Some(d) = gk {
                    self.accumulate(kernel, d);
                }
                if let Some(d) = gb {
                    self.accumulate(bias, d);
                }
            }
            Op::AvgPoolSpatial(x) => {
                let len = self.value(x).len();
                let c = g.len();
                let inv = 1.0 / (len / c) as f64;
                let d = (0..len).map(|j| g[j % c] * inv).collect();
                self.accumulate(x, d);
            }
            Op::AvgPoolChannel(x) => {
                let len = self.value(x).len();
                let c = len / g.len();
                let inv = 1.0 / c as f64;
                let d = (0..len).map(|j| g[j / c] * inv).collect();
                self.accumulate(x, d);
            }
            Op::ScaleChannels(x, w) => {
                let c = self.value(w).len();
                if self.needs(x) {
                    let wv = self.value(w).data();
                    let d = g.iter().enumerate().map(|(j, gv)| gv * wv[j % c]).collect();
                    self.accumulate(x, d);
                }
                if self.needs(w) {
                    let mut d = vec![0.0; c];
                    for (gp, xp) in g.chunks_exact(c).zip(self.value(x).data().chunks_exact(c)) {
                        for ((o, gv), xv) in d.iter_mut().zip(gp).zip(xp) {
                            *o += gv * xv;
                        }
                    }
                    self.accumulate(w, d);
                }
            }
            Op::ScalePositions(x, s) => {
                let c = self.value(x).len() / self.value(s).len();
                if self.needs(x) {
                    let sv = self.value(s).data();
                    let d = g.iter().enumerate().map(|(j, gv)| gv * sv[j / c]).collect();
                    self.accumulate(x, d);
                }
                if self.needs(s) {
                    let d = g
                        .chunks_exact(c)
                        .zip(self.value(x).data().chunks_exact(c))
                        .map(|(gp, xp)| kernels::dot(gp, xp))
                        .collect();
                    self.accumulate(s, d);
                }
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(x, g.to_vec());
                if self.needs(b) {
                    let m = self.value(b).len();
                    let mut d = vec![0.0; m];
                    for row in g.chunks_exact(m) {
                        for (o, v) in d.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(b, d);
                }
            }
            Op::Reshape(x) => self.accumulate(x, g.to_vec()),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        self.accumulate(p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::ConcatLast(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| *self.shape(p).last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let mut col = 0;
                for (&p, &wd) in parts.iter().zip(&widths) {
                    if self.needs(p) {
                        let d = g
                            .chunks_exact(total)
                            .flat_map(|row| row[col..col + wd].iter().copied())
                            .collect();
                        self.accumulate(p, d);
                    }
                    col += wd;
                }
            }
            Op::SliceRows { x, start } => {
                let row = g.len() / self.nodes[i].value.shape()[0];
                if let Some(buf) = self.grad_buf(x) {
                    let off = start * row;
                    for (o, v) in buf[off..off + g.len()].iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::Sum(x) => {
                let len = self.value(x).len();
                self.accumulate(x, vec![g[0]; len]);
            }
            Op::Mean(x) => {
                let len = self.value(x).len();
                self.accumulate(x, vec![g[0] / len as f64; len]);
            }
            Op::FocalLoss {
                logits,
                targets,
                gamma,
                alpha,
            } => {
                let scale = g[0] / targets.len() as f64;
                let d = self
                    .value(logits)
                    .data()
                    .iter()
                    .zip(&targets)
                    .map(|(&x, &y)| focal_element(x, y, gamma, alpha).1 * scale)
                    .collect();
                self.accumulate(logits, d);
            }
        }
    }

    /// Gradient of the last `backward` root w.r.t. `id`, if one flowed there.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let g = self.grads.get(id.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(id).to_vec(), g.clone()))
    }

    /// Gradient for a named parameter; zeros if the parameter was registered
    /// but received no gradient.
    pub fn param_grad(&self, name: &str) -> Option<Tensor> {
        let id = self.param_id(name)?;
        Some(self.grad(id).unwrap_or_else(|| Tensor::zeros(self.shape(id))))
    }
}
