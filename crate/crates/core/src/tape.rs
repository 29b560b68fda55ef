//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! walks the record in reverse and accumulates gradients into each node.
//! Node indices only ever reference earlier nodes, so reverse index order is
//! a valid topological order and the parent graph is acyclic by construction.
//!
//! Tensors are immutable values and safe to share across threads; a tape is
//! confined to the thread that built it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose2d(NodeId),
    Conv2d {
        x: NodeId,
        k: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    ConvTranspose2d {
        x: NodeId,
        k: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    Sum(NodeId),
    Mean(NodeId),
    /// Sum over every axis except `axis`, yielding a vector of length
    /// `shape[axis]`.
    ChannelSum {
        x: NodeId,
        axis: usize,
    },
    AddChannel {
        x: NodeId,
        v: NodeId,
        axis: usize,
    },
    MulChannel {
        x: NodeId,
        v: NodeId,
        axis: usize,
    },
    DivChannel {
        x: NodeId,
        v: NodeId,
        axis: usize,
    },
    Sqrt(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    MaxScalar(NodeId, f64),
    Reshape(NodeId),
    AvgPool2d {
        x: NodeId,
        k: usize,
    },
    NearestUpscale2d {
        x: NodeId,
        factor: usize,
    },
}

struct TapeNode {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// Records a forward computation and replays it backward for gradients.
pub struct Tape {
    nodes: Vec<TapeNode>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    /// Enters a tensor as a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the last [`Tape::backward`] call. Nodes the
    /// root does not reach get a zero gradient of the value's shape.
    pub fn grad(&self, id: NodeId) -> Tensor {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape().to_vec()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(TapeNode {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<NodeId> {
        if let Some(i) = value.first_non_finite() {
            return Err(Error::NonFinite {
                op: op_name,
                detail: format!("element {i} of output"),
            });
        }
        Ok(self.push(value, op))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    // ── elementwise binary ──────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = zip2(self.value(a), self.value(b), |x, y| x + y);
        self.push_checked("add", data, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = zip2(self.value(a), self.value(b), |x, y| x - y);
        self.push_checked("sub", data, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = zip2(self.value(a), self.value(b), |x, y| x * y);
        self.push_checked("mul", data, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("div", a, b)?;
        if self.value(b).data().contains(&0.0) {
            return Err(Error::DivisionByZero { op: "div" });
        }
        let data = zip2(self.value(a), self.value(b), |x, y| x / y);
        self.push_checked("div", data, Op::Div(a, b))
    }

    // ── scalar ops ──────────────────────────────────────────────────────

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data = self.value(a).map(|x| x + c);
        self.push_checked("add_scalar", data, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data = self.value(a).map(|x| x * c);
        self.push_checked("mul_scalar", data, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.mul_scalar(a, -1.0)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::from_vec(vec![m, n], out)?;
        self.push_checked("matmul", t, Op::MatMul(a, b))
    }

    pub fn transpose2d(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose2d",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::from_vec(vec![c, r], out)?;
        self.push_checked("transpose2d", t, Op::Transpose2d(a))
    }

    // ── convolutions (NCHW) ─────────────────────────────────────────────

    /// Cross-correlation of `x: [b, ci, h, w]` with `k: [co, ci, kh, kw]`.
    /// Requires `(h + 2p - kh)` divisible by the stride so that the
    /// transposed convolution is its exact adjoint.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let out = conv2d_raw(self.value(x), self.value(k), stride, pad)?;
        self.push_checked("conv2d", out, Op::Conv2d { x, k, stride, pad })
    }

    /// Adjoint of [`Tape::conv2d`] with the same kernel layout: maps
    /// `x: [b, co, oh, ow]` to `[b, ci, h, w]` with
    /// `h = (oh-1)*stride - 2*pad + kh`.
    pub fn conv2d_transposed(
        &mut self,
        x: NodeId,
        k: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let out = convt2d_raw(self.value(x), self.value(k), stride, pad)?;
        self.push_checked(
            "conv2d_transposed",
            out,
            Op::ConvTranspose2d { x, k, stride, pad },
        )
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.push_checked("mean", Tensor::scalar(s / n), Op::Mean(a))
    }

    /// Sums over every axis except `axis`; result shape `[shape[axis]]`.
    pub fn channel_sum(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArg(format!(
                "channel_sum axis {axis} out of range for shape {shape:?}"
            )));
        }
        let c = shape[axis];
        let mut out = vec![0.0; c];
        for_each_channel(&shape, axis, self.value(a).data(), |ch, v| out[ch] += v);
        let t = Tensor::from_vec(vec![c], out)?;
        self.push_checked("channel_sum", t, Op::ChannelSum { x: a, axis })
    }

    // ── channel broadcasts: tensor (+|*|/) vector indexed by one axis ───

    fn check_channel(&self, op: &'static str, a: NodeId, v: NodeId, axis: usize) -> Result<()> {
        let (sa, sv) = (self.value(a).shape(), self.value(v).shape());
        if axis >= sa.len() || sv.len() != 1 || sv[0] != sa[axis] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sv.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add_channel(&mut self, a: NodeId, v: NodeId, axis: usize) -> Result<NodeId> {
        self.check_channel("add_channel", a, v, axis)?;
        let out = channel_apply(self.value(a), self.value(v), axis, |x, c| x + c);
        self.push_checked("add_channel", out, Op::AddChannel { x: a, v, axis })
    }

    pub fn mul_channel(&mut self, a: NodeId, v: NodeId, axis: usize) -> Result<NodeId> {
        self.check_channel("mul_channel", a, v, axis)?;
        let out = channel_apply(self.value(a), self.value(v), axis, |x, c| x * c);
        self.push_checked("mul_channel", out, Op::MulChannel { x: a, v, axis })
    }

    pub fn div_channel(&mut self, a: NodeId, v: NodeId, axis: usize) -> Result<NodeId> {
        self.check_channel("div_channel", a, v, axis)?;
        if self.value(v).data().contains(&0.0) {
            return Err(Error::DivisionByZero { op: "div_channel" });
        }
        let out = channel_apply(self.value(a), self.value(v), axis, |x, c| x / c);
        self.push_checked("div_channel", out, Op::DivChannel { x: a, v, axis })
    }

    // ── elementwise unary ───────────────────────────────────────────────

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.value(a).map(f64::sqrt);
        self.push_checked("sqrt", data, Op::Sqrt(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.value(a).map(sigmoid_scalar);
        self.push_checked("sigmoid", data, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.value(a).map(softplus_scalar);
        self.push_checked("softplus", data, Op::Softplus(a))
    }

    /// Elementwise `max(x, c)`; the gradient follows `x` where `x > c`.
    pub fn max_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data = self.value(a).map(|x| x.max(c));
        self.push_checked("max_scalar", data, Op::MaxScalar(a, c))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.value(a).reshaped(shape)?;
        self.push_checked("reshape", t, Op::Reshape(a))
    }

    /// Average pooling with window == stride == `k` on NCHW input.
    pub fn avg_pool2d(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return Err(Error::InvalidArg(format!(
                "avg_pool2d: window {k} does not tile shape {s:?}"
            )));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let xd = self.value(a).data();
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; b * c * oh * ow];
        for bc in 0..b * c {
            let src = &xd[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += src[(oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    dst[oy * ow + ox] = acc * inv;
                }
            }
        }
        let t = Tensor::from_vec(vec![b, c, oh, ow], out)?;
        self.push_checked("avg_pool2d", t, Op::AvgPool2d { x: a, k })
    }

    /// Nearest-neighbour upscaling by an integer factor on NCHW input.
    pub fn nearest_upscale2d(&mut self, a: NodeId, factor: usize) -> Result<NodeId> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::InvalidArg(format!(
                "nearest_upscale2d: factor {factor} invalid for shape {s:?}"
            )));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xd = self.value(a).data();
        let mut out = vec![0.0; b * c * oh * ow];
        for bc in 0..b * c {
            let src = &xd[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    dst[oy * ow + ox] = src[(oy / factor) * w + ox / factor];
                }
            }
        }
        let t = Tensor::from_vec(vec![b, c, oh, ow], out)?;
        self.push_checked(
            "nearest_upscale2d",
            t,
            Op::NearestUpscale2d { x: a, factor },
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulates `d(root)/d(node)` into every node reachable from `root`.
    /// `root` must be scalar. A node used k times receives exactly k
    /// gradient contributions.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: self.nodes[root.0].value.shape().to_vec(),
            });
        }
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::from_vec(
            self.nodes[root.0].value.shape().to_vec(),
            vec![1.0],
        )?);

        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum(a, g.clone());
                    self.accum(b, g);
                }
                Op::Sub(a, b) => {
                    self.accum(a, g.clone());
                    self.accum(b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let ga = zip2(&g, self.value(b), |gv, bv| gv * bv);
                    let gb = zip2(&g, self.value(a), |gv, av| gv * av);
                    self.accum(a, ga);
                    self.accum(b, gb);
                }
                Op::Div(a, b) => {
                    let ga = zip2(&g, self.value(b), |gv, bv| gv / bv);
                    let y = &self.nodes[i].value;
                    let gb_data: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(y.data().iter())
                        .zip(self.value(b).data().iter())
                        .map(|((gv, yv), bv)| -gv * yv / bv)
                        .collect();
                    let gb = Tensor::from_vec(self.value(b).shape().to_vec(), gb_data).unwrap();
                    self.accum(a, ga);
                    self.accum(b, gb);
                }
                Op::AddScalar(a) => self.accum(a, g),
                Op::MulScalar(a, c) => self.accum(a, g.map(|v| v * c)),
                Op::MatMul(a, b) => {
                    let (m, k) = {
                        let s = self.value(a).shape();
                        (s[0], s[1])
                    };
                    let n = self.value(b).shape()[1];
                    // ga = g . b^T ; gb = a^T . g
                    let bt = transpose_raw(self.value(b).data(), k, n);
                    let ga = matmul_raw(g.data(), &bt, m, n, k);
                    let at = transpose_raw(self.value(a).data(), m, k);
                    let gb = matmul_raw(&at, g.data(), k, m, n);
                    self.accum(a, Tensor::from_vec(vec![m, k], ga).unwrap());
                    self.accum(b, Tensor::from_vec(vec![k, n], gb).unwrap());
                }
                Op::Transpose2d(a) => {
                    let s = g.shape();
                    let gt = transpose_raw(g.data(), s[0], s[1]);
                    let ga = Tensor::from_vec(vec![s[1], s[0]], gt).unwrap();
                    self.accum(a, ga);
                }
                Op::Conv2d { x, k, stride, pad } => {
                    let gx = convt2d_raw(&g, self.value(k), stride, pad).unwrap();
                    let gk = conv2d_kernel_grad(self.value(x), &g, self.value(k).shape(), stride, pad);
                    self.accum(x, gx);
                    self.accum(k, gk);
                }
                Op::ConvTranspose2d { x, k, stride, pad } => {
                    let gx = conv2d_raw(&g, self.value(k), stride, pad).unwrap();
                    let gk = conv2d_kernel_grad(&g, self.value(x), self.value(k).shape(), stride, pad);
                    self.accum(x, gx);
                    self.accum(k, gk);
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    let shape = self.value(a).shape().to_vec();
                    self.accum(a, Tensor::full(shape, gv));
                }
                Op::Mean(a) => {
                    let n = self.value(a).numel() as f64;
                    let gv = g.item() / n;
                    let shape = self.value(a).shape().to_vec();
                    self.accum(a, Tensor::full(shape, gv));
                }
                Op::ChannelSum { x, axis } => {
                    let shape = self.value(x).shape().to_vec();
                    let mut gx = Tensor::zeros(shape.clone());
                    let gd = g.data().to_vec();
                    for_each_channel_mut(&shape, axis, gx.data_mut(), |ch, slot| {
                        *slot += gd[ch];
                    });
                    self.accum(x, gx);
                }
                Op::AddChannel { x, v, axis } => {
                    let shape = self.value(x).shape().to_vec();
                    let c = self.value(v).numel();
                    let mut gv = vec![0.0; c];
                    for_each_channel(&shape, axis, g.data(), |ch, gval| gv[ch] += gval);
                    self.accum(x, g);
                    self.accum(v, Tensor::from_vec(vec![c], gv).unwrap());
                }
                Op::MulChannel { x, v, axis } => {
                    let shape = self.value(x).shape().to_vec();
                    let c = self.value(v).numel();
                    let gx = channel_apply(&g, self.value(v), axis, |gval, vc| gval * vc);
                    let mut gv = vec![0.0; c];
                    {
                        let xd = self.value(x).data();
                        let gd = g.data();
                        for_each_channel_idx(&shape, axis, |ch, flat| {
                            gv[ch] += gd[flat] * xd[flat];
                        });
                    }
                    self.accum(x, gx);
                    self.accum(v, Tensor::from_vec(vec![c], gv).unwrap());
                }
                Op::DivChannel { x, v, axis } => {
                    let shape = self.value(x).shape().to_vec();
                    let c = self.value(v).numel();
                    let gx = channel_apply(&g, self.value(v), axis, |gval, vc| gval / vc);
                    let mut gv = vec![0.0; c];
                    {
                        let yd = self.nodes[i].value.data();
                        let gd = g.data();
                        let vd = self.value(v).data();
                        for_each_channel_idx(&shape, axis, |ch, flat| {
                            gv[ch] -= gd[flat] * yd[flat] / vd[ch];
                        });
                    }
                    self.accum(x, gx);
                    self.accum(v, Tensor::from_vec(vec![c], gv).unwrap());
                }
                Op::Sqrt(a) => {
                    let y = &self.nodes[i].value;
                    let ga = zip2(&g, y, |gv, yv| gv * 0.5 / yv);
                    self.accum(a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let ga = zip2(&g, y, |gv, yv| gv * yv * (1.0 - yv));
                    self.accum(a, ga);
                }
                Op::Softplus(a) => {
                    let ga = zip2(&g, self.value(a), |gv, xv| gv * sigmoid_scalar(xv));
                    self.accum(a, ga);
                }
                Op::MaxScalar(a, c) => {
                    let ga = zip2(&g, self.value(a), |gv, xv| if xv > c { gv } else { 0.0 });
                    self.accum(a, ga);
                }
                Op::Reshape(a) => {
                    let shape = self.value(a).shape().to_vec();
                    self.accum(a, g.reshaped(shape).unwrap());
                }
                Op::AvgPool2d { x, k } => {
                    let s = self.value(x).shape().to_vec();
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (h / k, w / k);
                    let inv = 1.0 / (k * k) as f64;
                    let gd = g.data().to_vec();
                    let mut gx = Tensor::zeros(s);
                    let gxd = gx.data_mut();
                    for bc in 0..b * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gd[bc * oh * ow + oy * ow + ox] * inv;
                                for dy in 0..k {
                                    for dx in 0..k {
                                        gxd[bc * h * w + (oy * k + dy) * w + ox * k + dx] += gv;
                                    }
                                }
                            }
                        }
                    }
                    self.accum(x, gx);
                }
                Op::NearestUpscale2d { x, factor } => {
                    let s = self.value(x).shape().to_vec();
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (h * factor, w * factor);
                    let gd = g.data().to_vec();
                    let mut gx = Tensor::zeros(s);
                    let gxd = gx.data_mut();
                    for bc in 0..b * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                gxd[bc * h * w + (oy / factor) * w + ox / factor]
                                    += gd[bc * oh * ow + oy * ow + ox];
                            }
                        }
                    }
                    self.accum(x, gx);
                }
            }
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, g: Tensor) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(existing) => {
                for (dst, src) in existing.data_mut().iter_mut().zip(g.data().iter()) {
                    *dst += src;
                }
            }
            slot @ None => {
                let shaped = if g.shape() == node.value.shape() {
                    g
                } else {
                    g.reshaped(node.value.shape().to_vec()).unwrap()
                };
                *slot = Some(shaped);
            }
        }
    }
}

// ── raw kernels ─────────────────────────────────────────────────────────

fn zip2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data).unwrap()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(row.iter()) {
                *d += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Walks a row-major buffer and reports each element's index along `axis`.
fn for_each_channel(shape: &[usize], axis: usize, data: &[f64], mut f: impl FnMut(usize, f64)) {
    let inner: usize = shape[axis + 1..].iter().product();
    let c = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let mut flat = 0;
    for _ in 0..outer {
        for ch in 0..c {
            for _ in 0..inner {
                f(ch, data[flat]);
                flat += 1;
            }
        }
    }
}

fn for_each_channel_mut(
    shape: &[usize],
    axis: usize,
    data: &mut [f64],
    mut f: impl FnMut(usize, &mut f64),
) {
    let inner: usize = shape[axis + 1..].iter().product();
    let c = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let mut flat = 0;
    for _ in 0..outer {
        for ch in 0..c {
            for _ in 0..inner {
                f(ch, &mut data[flat]);
                flat += 1;
            }
        }
    }
}

fn for_each_channel_idx(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let inner: usize = shape[axis + 1..].iter().product();
    let c = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let mut flat = 0;
    for _ in 0..outer {
        for ch in 0..c {
            for _ in 0..inner {
                f(ch, flat);
                flat += 1;
            }
        }
    }
}

fn channel_apply(a: &Tensor, v: &Tensor, axis: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    let vd = v.data().to_vec();
    let shape = a.shape().to_vec();
    for_each_channel_mut(&shape, axis, out.data_mut(), |ch, slot| {
        *slot = f(*slot, vd[ch]);
    });
    out
}

fn conv_shapes(
    op: &'static str,
    xs: &[usize],
    ks: &[usize],
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    if xs.len() != 4 || ks.len() != 4 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: xs.to_vec(),
            rhs: ks.to_vec(),
        });
    }
    Ok((xs[0], xs[1], xs[2], xs[3], ks[1], ks[2], ks[3]))
}

/// `x: [b, ci, h, w]`, `k: [co, ci, kh, kw]` -> `[b, co, oh, ow]`.
fn conv2d_raw(x: &Tensor, k: &Tensor, stride: (usize, usize), pad: (usize, usize)) -> Result<Tensor> {
    let (b, ci, h, w, kci, kh, kw) = conv_shapes("conv2d", x.shape(), k.shape())?;
    let co = k.shape()[0];
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    if ci != kci {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let oh_num = h + 2 * ph;
    let ow_num = w + 2 * pw;
    if oh_num < kh || ow_num < kw || (oh_num - kh) % sh != 0 || (ow_num - kw) % sw != 0 {
        return Err(Error::InvalidArg(format!(
            "conv2d: input {h}x{w} pad {ph},{pw} kernel {kh}x{kw} stride {sh},{sw} \
             gives non-integral output size {}x{}",
            (oh_num as f64 - kh as f64) / sh as f64 + 1.0,
            (ow_num as f64 - kw as f64) / sw as f64 + 1.0,
        )));
    }
    let oh = (oh_num - kh) / sh + 1;
    let ow = (ow_num - kw) / sw + 1;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; b * co * oh * ow];
    for bi in 0..b {
        for o in 0..co {
            for c in 0..ci {
                let kbase = ((o * ci) + c) * kh * kw;
                let xbase = (bi * ci + c) * h * w;
                let obase = (bi * co + o) * oh * ow;
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..kh {
                            let iy = (yy * sh + dy) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dx in 0..kw {
                                let ix = (xx * sw + dx) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xd[xbase + iy as usize * w + ix as usize]
                                    * kd[kbase + dy * kw + dx];
                            }
                        }
                        out[obase + yy * ow + xx] += acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![b, co, oh, ow], out)
}

/// Adjoint of [`conv2d_raw`]: `x: [b, co, oh, ow]`, `k: [co, ci, kh, kw]`
/// -> `[b, ci, h, w]` with `h = (oh-1)*sh - 2*ph + kh`.
fn convt2d_raw(x: &Tensor, k: &Tensor, stride: (usize, usize), pad: (usize, usize)) -> Result<Tensor> {
    let xs = x.shape();
    let ks = k.shape();
    if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[0] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_transposed",
            lhs: xs.to_vec(),
            rhs: ks.to_vec(),
        });
    }
    let (b, co, oh, ow) = (xs[0], xs[1], xs[2], xs[3]);
    let (ci, kh, kw) = (ks[1], ks[2], ks[3]);
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let h_full = (oh - 1) * sh + kh;
    let w_full = (ow - 1) * sw + kw;
    if h_full < 2 * ph + 1 || w_full < 2 * pw + 1 {
        return Err(Error::InvalidArg(format!(
            "conv2d_transposed: input {oh}x{ow} stride {sh},{sw} kernel {kh}x{kw} \
             pad {ph},{pw} gives non-positive output size"
        )));
    }
    let h = h_full - 2 * ph;
    let w = w_full - 2 * pw;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; b * ci * h * w];
    for bi in 0..b {
        for o in 0..co {
            let xbase0 = (bi * co + o) * oh * ow;
            for c in 0..ci {
                let kbase = ((o * ci) + c) * kh * kw;
                let obase = (bi * ci + c) * h * w;
                for yy in 0..oh {
                    for xx in 0..ow {
                        let v = xd[xbase0 + yy * ow + xx];
                        if v == 0.0 {
                            continue;
                        }
                        for dy in 0..kh {
                            let iy = (yy * sh + dy) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dx in 0..kw {
                                let ix = (xx * sw + dx) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                out[obase + iy as usize * w + ix as usize]
                                    += v * kd[kbase + dy * kw + dx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![b, ci, h, w], out)
}

/// Gradient of a convolution's output `gy: [b, co, oh, ow]` with respect to
/// the kernel, given the convolution input `x: [b, ci, h, w]`.
fn conv2d_kernel_grad(
    x: &Tensor,
    gy: &Tensor,
    kshape: &[usize],
    stride: (usize, usize),
    pad: (usize, usize),
) -> Tensor {
    let (b, ci, h, w) = {
        let s = x.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (co, oh, ow) = {
        let s = gy.shape();
        (s[1], s[2], s[3])
    };
    let (kh, kw) = (kshape[2], kshape[3]);
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let xd = x.data();
    let gd = gy.data();
    let mut gk = vec![0.0; co * ci * kh * kw];
    for bi in 0..b {
        for o in 0..co {
            let gbase = (bi * co + o) * oh * ow;
            for c in 0..ci {
                let xbase = (bi * ci + c) * h * w;
                let kbase = (o * ci + c) * kh * kw;
                for yy in 0..oh {
                    for xx in 0..ow {
                        let gv = gd[gbase + yy * ow + xx];
                        if gv == 0.0 {
                            continue;
                        }
                        for dy in 0..kh {
                            let iy = (yy * sh + dy) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dx in 0..kw {
                                let ix = (xx * sw + dx) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                gk[kbase + dy * kw + dx]
                                    += gv * xd[xbase + iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(kshape.to_vec(), gk).unwrap()
}
