//! Layer primitives: strict and affine weight-normalized linear and
//! convolution layers, translated parametric ReLU, batch normalization
//! (full and mean-only), weight-normalized addition, and the plain
//! biased layers used by the non-normalized baselines.
//!
//! Every forward here is composed from tape primitives, so gradients flow
//! through norms and batch statistics automatically. The math functions
//! take already-staged parameter nodes; the structs own parameter tensors
//! and provide initialization.

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Stability term added to every sum of squared weights before the square
/// root (weight norms and weight-normalized addition alike).
pub const WN_EPS: f64 = 1e-6;

/// Stability term inside the batch-normalization standard deviation. The
/// choice follows common practice; the method itself does not fix it.
pub const BN_EPS: f64 = 1e-5;

/// Momentum of the batch-normalization running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass mode: training uses batch statistics, inference uses the
/// stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

// ── shared math on staged nodes ─────────────────────────────────────────

/// Per-row Euclidean norm of a weight tensor with the stability term:
/// `sqrt(sum_j w[r,j]^2 + eps)` for each slice along `axis`.
pub fn weight_norms(tape: &mut Tape, w: NodeId, axis: usize, eps: f64) -> Result<NodeId> {
    let sq = tape.mul(w, w)?;
    let ssq = tape.channel_sum(sq, axis)?;
    let ssq_eps = tape.add_scalar(ssq, eps)?;
    tape.sqrt(ssq_eps)
}

/// Strict weight-normalized linear layer: `y_i = w_i . x / sqrt(|w_i|^2 + eps)`.
/// No bias, scale, or shift. `x: [batch, in]`, `w: [out, in]`.
pub fn strict_wn_linear(tape: &mut Tape, w: NodeId, x: NodeId, eps: f64) -> Result<NodeId> {
    let (ws, xs) = (tape.value(w).shape().to_vec(), tape.value(x).shape().to_vec());
    if ws.len() != 2 || xs.len() != 2 || xs[1] != ws[1] {
        return Err(Error::ShapeMismatch {
            op: "strict_wn_linear",
            lhs: xs,
            rhs: ws,
        });
    }
    let norms = weight_norms(tape, w, 0, eps)?;
    let wt = tape.transpose2d(w)?;
    let proj = tape.matmul(x, wt)?;
    tape.div_channel(proj, norms, 1)
}

/// Affine weight-normalized linear layer: strict projection followed by a
/// learned per-output scale and shift.
pub fn affine_wn_linear(
    tape: &mut Tape,
    w: NodeId,
    gamma: NodeId,
    beta: NodeId,
    x: NodeId,
    eps: f64,
) -> Result<NodeId> {
    let y = strict_wn_linear(tape, w, x, eps)?;
    let scaled = tape.mul_channel(y, gamma, 1)?;
    tape.add_channel(scaled, beta, 1)
}

/// Plain linear layer `y = x W^T + b`.
pub fn linear(tape: &mut Tape, w: NodeId, b: Option<NodeId>, x: NodeId) -> Result<NodeId> {
    let wt = tape.transpose2d(w)?;
    let y = tape.matmul(x, wt)?;
    match b {
        Some(b) => tape.add_channel(y, b, 1),
        None => Ok(y),
    }
}

/// Kernel norm divisor for strided and transposed convolutions: the full
/// kernel norm divided by `sqrt(dw * dh)`, shared across all stride
/// subsets. `norm_axis` selects the output-channel axis of the kernel.
fn conv_norms(
    tape: &mut Tape,
    kernel: NodeId,
    norm_axis: usize,
    stride: (usize, usize),
    eps: f64,
) -> Result<NodeId> {
    let norms = weight_norms(tape, kernel, norm_axis, eps)?;
    let (sh, sw) = stride;
    if sh * sw > 1 {
        tape.mul_scalar(norms, 1.0 / ((sh * sw) as f64).sqrt())
    } else {
        Ok(norms)
    }
}

/// Strict weight-normalized convolution. `kernel: [co, ci, kh, kw]`,
/// normalized per output channel; for stride > 1 the norm is divided by
/// `sqrt(dw * dh)`.
pub fn strict_wn_conv2d(
    tape: &mut Tape,
    kernel: NodeId,
    x: NodeId,
    stride: (usize, usize),
    pad: (usize, usize),
    eps: f64,
) -> Result<NodeId> {
    let norms = conv_norms(tape, kernel, 0, stride, eps)?;
    let kn = tape.div_channel(kernel, norms, 0)?;
    tape.conv2d(x, kn, stride, pad)
}

/// Strict weight-normalized transposed convolution.
/// `kernel: [ci, co, kh, kw]` (input channels first, matching the adjoint
/// kernel layout); normalized per output channel, i.e. along axis 1.
pub fn strict_wn_conv_transpose2d(
    tape: &mut Tape,
    kernel: NodeId,
    x: NodeId,
    stride: (usize, usize),
    pad: (usize, usize),
    eps: f64,
) -> Result<NodeId> {
    let norms = conv_norms(tape, kernel, 1, stride, eps)?;
    let kn = tape.div_channel(kernel, norms, 1)?;
    tape.conv2d_transposed(x, kn, stride, pad)
}

/// Per-output-channel affine applied after a strict convolution, NCHW.
pub fn channel_affine(tape: &mut Tape, y: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
    let scaled = tape.mul_channel(y, gamma, 1)?;
    tape.add_channel(scaled, beta, 1)
}

/// First generator layer: a strict weight-normalized fully connected layer
/// from the latent code, reshaped into a `[channels, spatial, spatial]`
/// feature map. Normalization runs over the latent inputs only, not over
/// the kernel extent a transposed-convolution view would imply.
pub fn wn_fc_first(
    tape: &mut Tape,
    w: NodeId,
    z: NodeId,
    channels: usize,
    spatial: usize,
    eps: f64,
) -> Result<NodeId> {
    let out = strict_wn_linear(tape, w, z, eps)?;
    let batch = tape.value(out).shape()[0];
    if tape.value(out).shape()[1] != channels * spatial * spatial {
        return Err(Error::ShapeMismatch {
            op: "wn_fc_first",
            lhs: tape.value(out).shape().to_vec(),
            rhs: vec![channels, spatial, spatial],
        });
    }
    tape.reshape(out, vec![batch, channels, spatial, spatial])
}

/// Translated parametric ReLU with per-channel translation `alpha` and leak
/// `slope`: `y = x` where `x >= alpha`, else `slope * (x - alpha) + alpha`.
/// With `slope = 0` this is `max(x, alpha)`; with `alpha = 0` a plain PReLU.
pub fn tprelu(
    tape: &mut Tape,
    alpha: NodeId,
    slope: NodeId,
    x: NodeId,
    channel_axis: usize,
) -> Result<NodeId> {
    let neg_alpha = tape.neg(alpha)?;
    let t = tape.add_channel(x, neg_alpha, channel_axis)?;
    let pos = tape.max_scalar(t, 0.0)?;
    let neg = tape.sub(t, pos)?;
    let leaked = tape.mul_channel(neg, slope, channel_axis)?;
    let combined = tape.add(pos, leaked)?;
    tape.add_channel(combined, alpha, channel_axis)
}

/// Parametric ReLU with per-channel slope.
pub fn prelu(tape: &mut Tape, slope: NodeId, x: NodeId, channel_axis: usize) -> Result<NodeId> {
    let pos = tape.max_scalar(x, 0.0)?;
    let neg = tape.sub(x, pos)?;
    let leaked = tape.mul_channel(neg, slope, channel_axis)?;
    tape.add(pos, leaked)
}

/// Weight-normalized addition of two branches with per-channel weights:
/// `y = (w1 x1 + w2 x2) / sqrt(w1^2 + w2^2 + eps)`.
pub fn wn_add(
    tape: &mut Tape,
    w1: NodeId,
    w2: NodeId,
    x1: NodeId,
    x2: NodeId,
    channel_axis: usize,
    eps: f64,
) -> Result<NodeId> {
    let (s1, s2) = (tape.value(x1).shape().to_vec(), tape.value(x2).shape().to_vec());
    if s1 != s2 {
        return Err(Error::ShapeMismatch {
            op: "wn_add",
            lhs: s1,
            rhs: s2,
        });
    }
    let a = tape.mul_channel(x1, w1, channel_axis)?;
    let b = tape.mul_channel(x2, w2, channel_axis)?;
    let num = tape.add(a, b)?;
    let w1sq = tape.mul(w1, w1)?;
    let w2sq = tape.mul(w2, w2)?;
    let ssq = tape.add(w1sq, w2sq)?;
    let ssq_eps = tape.add_scalar(ssq, eps)?;
    let den = tape.sqrt(ssq_eps)?;
    tape.div_channel(num, den, channel_axis)
}

/// Per-channel batch statistics observed during a training-mode forward;
/// the caller folds them into the running estimates after the step.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the convention for running estimates.
    pub var: Vec<f64>,
}

/// Batch normalization in training mode: normalizes with batch statistics
/// (gradients flow through both the mean and the standard deviation) and
/// reports the statistics for the running-estimate update. When
/// `mean_only` is set, only the mean is subtracted and `beta` re-added;
/// the variance is left untouched.
pub fn batchnorm_train(
    tape: &mut Tape,
    gamma: NodeId,
    beta: NodeId,
    x: NodeId,
    eps: f64,
    mean_only: bool,
) -> Result<(NodeId, BnBatchStats)> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: shape,
            rhs: vec![],
        });
    }
    if shape[0] < 2 {
        return Err(Error::InvalidArg(format!(
            "batchnorm: training mode needs batch >= 2, got {}",
            shape[0]
        )));
    }
    let count: usize = shape.iter().product::<usize>() / shape[1];
    let inv = 1.0 / count as f64;

    let sums = tape.channel_sum(x, 1)?;
    let mean = tape.mul_scalar(sums, inv)?;
    let neg_mean = tape.neg(mean)?;
    let centered = tape.add_channel(x, neg_mean, 1)?;

    let sq = tape.mul(centered, centered)?;
    let var_sums = tape.channel_sum(sq, 1)?;
    let var = tape.mul_scalar(var_sums, inv)?;

    let stats = {
        let m = tape.value(mean).data().to_vec();
        let v_biased = tape.value(var).data();
        let bessel = count as f64 / (count as f64 - 1.0);
        BnBatchStats {
            mean: m,
            var: v_biased.iter().map(|v| v * bessel).collect(),
        }
    };

    let y = if mean_only {
        tape.add_channel(centered, beta, 1)?
    } else {
        let var_eps = tape.add_scalar(var, eps)?;
        let std = tape.sqrt(var_eps)?;
        let xhat = tape.div_channel(centered, std, 1)?;
        channel_affine(tape, xhat, gamma, beta)?
    };
    Ok((y, stats))
}

/// Batch normalization in inference mode, using running statistics entered
/// as constants.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_infer(
    tape: &mut Tape,
    gamma: NodeId,
    beta: NodeId,
    running_mean: &Tensor,
    running_var: &Tensor,
    x: NodeId,
    eps: f64,
    mean_only: bool,
) -> Result<NodeId> {
    let rm = tape.leaf(running_mean.map(|v| -v));
    let centered = tape.add_channel(x, rm, 1)?;
    if mean_only {
        return tape.add_channel(centered, beta, 1);
    }
    let std = tape.leaf(running_var.map(|v| (v + eps).sqrt()));
    let xhat = tape.div_channel(centered, std, 1)?;
    channel_affine(tape, xhat, gamma, beta)
}

// ── parameterized layer structs ─────────────────────────────────────────

/// Fan-in uniform initialization bound `1 / sqrt(fan_in)`.
fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrictWnLinear {
    pub weight: Tensor, // [out, in]
}

impl StrictWnLinear {
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut DetRng) -> Self {
        let b = fan_in_bound(in_dim);
        let mut data = vec![0.0; out_dim * in_dim];
        rng.fill_uniform(&mut data, -b, b);
        StrictWnLinear {
            weight: Tensor::from_vec(vec![out_dim, in_dim], data).unwrap(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let w = tape.leaf(self.weight.clone());
        strict_wn_linear(tape, w, x, WN_EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineWnLinear {
    pub weight: Tensor, // [out, in]
    pub gamma: Tensor,  // [out]
    pub beta: Tensor,   // [out]
}

impl AffineWnLinear {
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut DetRng) -> Self {
        let b = fan_in_bound(in_dim);
        let mut data = vec![0.0; out_dim * in_dim];
        rng.fill_uniform(&mut data, -b, b);
        AffineWnLinear {
            weight: Tensor::from_vec(vec![out_dim, in_dim], data).unwrap(),
            gamma: Tensor::full(vec![out_dim], 1.0),
            beta: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let w = tape.leaf(self.weight.clone());
        let g = tape.leaf(self.gamma.clone());
        let bt = tape.leaf(self.beta.clone());
        affine_wn_linear(tape, w, g, bt, x, WN_EPS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WnMode {
    Strict,
    Affine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WnConv2d {
    pub kernel: Tensor, // [co, ci, kh, kw]
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    /// Present in affine mode: per-output-channel scale and shift.
    pub affine: Option<(Tensor, Tensor)>,
}

impl WnConv2d {
    pub fn init(
        c_out: usize,
        c_in: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        mode: WnMode,
        rng: &mut DetRng,
    ) -> Self {
        let b = fan_in_bound(c_in * kernel * kernel);
        let mut data = vec![0.0; c_out * c_in * kernel * kernel];
        rng.fill_uniform(&mut data, -b, b);
        WnConv2d {
            kernel: Tensor::from_vec(vec![c_out, c_in, kernel, kernel], data).unwrap(),
            stride: (stride, stride),
            pad: (pad, pad),
            affine: match mode {
                WnMode::Strict => None,
                WnMode::Affine => Some((
                    Tensor::full(vec![c_out], 1.0),
                    Tensor::zeros(vec![c_out]),
                )),
            },
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let k = tape.leaf(self.kernel.clone());
        let y = strict_wn_conv2d(tape, k, x, self.stride, self.pad, WN_EPS)?;
        match &self.affine {
            None => Ok(y),
            Some((gamma, beta)) => {
                let g = tape.leaf(gamma.clone());
                let b = tape.leaf(beta.clone());
                channel_affine(tape, y, g, b)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WnConvTranspose2d {
    pub kernel: Tensor, // [ci, co, kh, kw]
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub affine: Option<(Tensor, Tensor)>,
}

impl WnConvTranspose2d {
    pub fn init(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        mode: WnMode,
        rng: &mut DetRng,
    ) -> Self {
        let b = fan_in_bound(c_in * kernel * kernel);
        let mut data = vec![0.0; c_in * c_out * kernel * kernel];
        rng.fill_uniform(&mut data, -b, b);
        WnConvTranspose2d {
            kernel: Tensor::from_vec(vec![c_in, c_out, kernel, kernel], data).unwrap(),
            stride: (stride, stride),
            pad: (pad, pad),
            affine: match mode {
                WnMode::Strict => None,
                WnMode::Affine => Some((
                    Tensor::full(vec![c_out], 1.0),
                    Tensor::zeros(vec![c_out]),
                )),
            },
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let k = tape.leaf(self.kernel.clone());
        let y = strict_wn_conv_transpose2d(tape, k, x, self.stride, self.pad, WN_EPS)?;
        match &self.affine {
            None => Ok(y),
            Some((gamma, beta)) => {
                let g = tape.leaf(gamma.clone());
                let b = tape.leaf(beta.clone());
                channel_affine(tape, y, g, b)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TPRelu {
    pub alpha: Tensor, // [channels]
    pub slope: Tensor, // [channels], kept in [0,1] by the optimizer hook
}

impl TPRelu {
    /// Starts as a plain PReLU: alpha 0, slope 0.25.
    pub fn init(channels: usize) -> Self {
        TPRelu {
            alpha: Tensor::zeros(vec![channels]),
            slope: Tensor::full(vec![channels], 0.25),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId, channel_axis: usize) -> Result<NodeId> {
        let a = tape.leaf(self.alpha.clone());
        let s = tape.leaf(self.slope.clone());
        tprelu(tape, a, s, x, channel_axis)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PRelu {
    pub slope: Tensor,
}

impl PRelu {
    pub fn init(channels: usize) -> Self {
        PRelu {
            slope: Tensor::full(vec![channels], 0.25),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId, channel_axis: usize) -> Result<NodeId> {
        let s = tape.leaf(self.slope.clone());
        prelu(tape, s, x, channel_axis)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    pub mean_only: bool,
}

impl BatchNorm {
    pub fn init(channels: usize, mean_only: bool) -> Self {
        BatchNorm {
            gamma: Tensor::full(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            mean_only,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        mode: Mode,
    ) -> Result<(NodeId, Option<BnBatchStats>)> {
        let g = tape.leaf(self.gamma.clone());
        let b = tape.leaf(self.beta.clone());
        match mode {
            Mode::Train => {
                let (y, stats) = batchnorm_train(tape, g, b, x, self.eps, self.mean_only)?;
                Ok((y, Some(stats)))
            }
            Mode::Inference => {
                let y = batchnorm_infer(
                    tape,
                    g,
                    b,
                    &self.running_mean,
                    &self.running_var,
                    x,
                    self.eps,
                    self.mean_only,
                )?;
                Ok((y, None))
            }
        }
    }

    /// Folds one training batch's statistics into the running estimates.
    pub fn apply_update(&mut self, stats: &BnBatchStats) {
        let m = self.momentum;
        for (rm, &bm) in self.running_mean.data_mut().iter_mut().zip(stats.mean.iter()) {
            *rm = (1.0 - m) * *rm + m * bm;
        }
        for (rv, &bv) in self.running_var.data_mut().iter_mut().zip(stats.var.iter()) {
            *rv = (1.0 - m) * *rv + m * bv;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WnAdd {
    pub w1: Tensor, // [channels]
    pub w2: Tensor, // [channels]
}

impl WnAdd {
    /// Residual-block initialization: shortcut weight 1, residue weight 0,
    /// so the block passes the shortcut through unchanged at the start.
    pub fn init_shortcut(channels: usize) -> Self {
        WnAdd {
            w1: Tensor::full(vec![channels], 1.0),
            w2: Tensor::zeros(vec![channels]),
        }
    }

    pub fn new(w1: Tensor, w2: Tensor) -> Self {
        WnAdd { w1, w2 }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x1: NodeId,
        x2: NodeId,
        channel_axis: usize,
    ) -> Result<NodeId> {
        let w1 = tape.leaf(self.w1.clone());
        let w2 = tape.leaf(self.w2.clone());
        wn_add(tape, w1, w2, x1, x2, channel_axis, WN_EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor, // [out, in]
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn init(out_dim: usize, in_dim: usize, bias: bool, rng: &mut DetRng) -> Self {
        let b = fan_in_bound(in_dim);
        let mut data = vec![0.0; out_dim * in_dim];
        rng.fill_uniform(&mut data, -b, b);
        Linear {
            weight: Tensor::from_vec(vec![out_dim, in_dim], data).unwrap(),
            bias: bias.then(|| Tensor::zeros(vec![out_dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let w = tape.leaf(self.weight.clone());
        let b = self.bias.as_ref().map(|b| tape.leaf(b.clone()));
        linear(tape, w, b, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub kernel: Tensor, // [co, ci, kh, kw]
    pub bias: Option<Tensor>,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2d {
    pub fn init(
        c_out: usize,
        c_in: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut DetRng,
    ) -> Self {
        let b = fan_in_bound(c_in * kernel * kernel);
        let mut data = vec![0.0; c_out * c_in * kernel * kernel];
        rng.fill_uniform(&mut data, -b, b);
        Conv2d {
            kernel: Tensor::from_vec(vec![c_out, c_in, kernel, kernel], data).unwrap(),
            bias: bias.then(|| Tensor::zeros(vec![c_out])),
            stride: (stride, stride),
            pad: (pad, pad),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let k = tape.leaf(self.kernel.clone());
        let y = tape.conv2d(x, k, self.stride, self.pad)?;
        match &self.bias {
            Some(b) => {
                let bn = tape.leaf(b.clone());
                tape.add_channel(y, bn, 1)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub kernel: Tensor, // [ci, co, kh, kw]
    pub bias: Option<Tensor>,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvTranspose2d {
    pub fn init(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut DetRng,
    ) -> Self {
        let b = fan_in_bound(c_in * kernel * kernel);
        let mut data = vec![0.0; c_in * c_out * kernel * kernel];
        rng.fill_uniform(&mut data, -b, b);
        ConvTranspose2d {
            kernel: Tensor::from_vec(vec![c_in, c_out, kernel, kernel], data).unwrap(),
            bias: bias.then(|| Tensor::zeros(vec![c_out])),
            stride: (stride, stride),
            pad: (pad, pad),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let k = tape.leaf(self.kernel.clone());
        let y = tape.conv2d_transposed(x, k, self.stride, self.pad)?;
        match &self.bias {
            Some(b) => {
                let bn = tape.leaf(b.clone());
                tape.add_channel(y, bn, 1)
            }
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        tape.leaf(Tensor::from_vec(shape, data).unwrap())
    }

    #[test]
    fn strict_wn_unit_basis_row_selects_coordinate() {
        let mut t = Tape::new();
        let w = leaf(&mut t, vec![1, 3], vec![0.0, 1.0, 0.0]);
        let x = leaf(&mut t, vec![1, 3], vec![5.0, 7.0, 9.0]);
        let y = strict_wn_linear(&mut t, w, x, WN_EPS).unwrap();
        // the eps inside the norm deflates by ~eps/2 relative
        assert!((t.value(y).data()[0] - 7.0).abs() < 1e-5);
    }

    #[test]
    fn strict_wn_hand_computed_value() {
        // w = (3,4), x = (1,1): (3+4)/5 = 1.4
        let mut t = Tape::new();
        let w = leaf(&mut t, vec![1, 2], vec![3.0, 4.0]);
        let x = leaf(&mut t, vec![1, 2], vec![1.0, 1.0]);
        let y = strict_wn_linear(&mut t, w, x, 0.0).unwrap();
        assert!((t.value(y).data()[0] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn affine_wn_hand_computed_value() {
        // 1.4 * 2 + 1 = 3.8
        let mut t = Tape::new();
        let w = leaf(&mut t, vec![1, 2], vec![3.0, 4.0]);
        let g = leaf(&mut t, vec![1], vec![2.0]);
        let b = leaf(&mut t, vec![1], vec![1.0]);
        let x = leaf(&mut t, vec![1, 2], vec![1.0, 1.0]);
        let y = affine_wn_linear(&mut t, w, g, b, x, 0.0).unwrap();
        assert!((t.value(y).data()[0] - 3.8).abs() < 1e-12);
    }

    #[test]
    fn affine_with_identity_params_equals_strict() {
        let mut rng = DetRng::new(21);
        let mut wd = vec![0.0; 4 * 6];
        let mut xd = vec![0.0; 3 * 6];
        rng.fill_normal(&mut wd);
        rng.fill_normal(&mut xd);
        let mut t = Tape::new();
        let w = leaf(&mut t, vec![4, 6], wd);
        let g = leaf(&mut t, vec![4], vec![1.0; 4]);
        let b = leaf(&mut t, vec![4], vec![0.0; 4]);
        let x = leaf(&mut t, vec![3, 6], xd);
        let strict = strict_wn_linear(&mut t, w, x, WN_EPS).unwrap();
        let affine = affine_wn_linear(&mut t, w, g, b, x, WN_EPS).unwrap();
        assert!(t.value(strict).max_abs_diff(t.value(affine)) < 1e-15);
    }

    #[test]
    fn affine_with_zero_gamma_is_constant_beta() {
        let mut t = Tape::new();
        let w = leaf(&mut t, vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]);
        let g = leaf(&mut t, vec![2], vec![0.0, 0.0]);
        let b = leaf(&mut t, vec![2], vec![7.0, -3.0]);
        for xv in [vec![1.0, 1.0, 1.0], vec![-5.0, 2.0, 0.1]] {
            let x = leaf(&mut t, vec![1, 3], xv);
            let y = affine_wn_linear(&mut t, w, g, b, x, WN_EPS).unwrap();
            assert_eq!(t.value(y).data(), &[7.0, -3.0]);
        }
    }

    #[test]
    fn tprelu_piecewise_values() {
        let mut t = Tape::new();
        // alpha = 0, slope = 0: plain ReLU
        let a0 = leaf(&mut t, vec![1], vec![0.0]);
        let s0 = leaf(&mut t, vec![1], vec![0.0]);
        let x = leaf(&mut t, vec![2, 1], vec![-1.0, 2.0]);
        let y = tprelu(&mut t, a0, s0, x, 1).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);

        // alpha = 1, slope = 0: max(x, 1)
        let a1 = leaf(&mut t, vec![1], vec![1.0]);
        let x2 = leaf(&mut t, vec![2, 1], vec![0.5, 3.0]);
        let y2 = tprelu(&mut t, a1, s0, x2, 1).unwrap();
        assert_eq!(t.value(y2).data(), &[1.0, 3.0]);

        // alpha = -1, slope = 0.5, x = -3: 0.5*(-3-(-1)) + (-1) = -2
        let am = leaf(&mut t, vec![1], vec![-1.0]);
        let sh = leaf(&mut t, vec![1], vec![0.5]);
        let x3 = leaf(&mut t, vec![1, 1], vec![-3.0]);
        let y3 = tprelu(&mut t, am, sh, x3, 1).unwrap();
        assert_eq!(t.value(y3).data(), &[-2.0]);
    }

    #[test]
    fn tprelu_with_zero_params_is_relu() {
        let layer = TPRelu {
            alpha: Tensor::zeros(vec![3]),
            slope: Tensor::zeros(vec![3]),
        };
        let mut t = Tape::new();
        let x = leaf(
            &mut t,
            vec![2, 3],
            vec![-2.0, 0.5, -0.1, 3.0, -4.0, 1.0],
        );
        let y = layer.forward(&mut t, x, 1).unwrap();
        let expect: Vec<f64> = t.value(x).data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(t.value(y).data(), &expect[..]);
    }

    #[test]
    fn wn_add_passthrough_and_symmetry() {
        let mut t = Tape::new();
        let x1 = leaf(&mut t, vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]);
        let x2 = leaf(&mut t, vec![2, 2], vec![10.0, 20.0, 30.0, 40.0]);

        // w1 = 1, w2 = 0: shortcut passthrough
        let one = leaf(&mut t, vec![2], vec![1.0, 1.0]);
        let zero = leaf(&mut t, vec![2], vec![0.0, 0.0]);
        let y = wn_add(&mut t, one, zero, x1, x2, 1, 0.0).unwrap();
        assert!(t.value(y).max_abs_diff(t.value(x1)) < 1e-15);

        // w1 = w2 = 1: (x1 + x2) / sqrt(2)
        let y2 = wn_add(&mut t, one, one, x1, x2, 1, 0.0).unwrap();
        let sqrt2 = 2.0_f64.sqrt();
        for (i, v) in t.value(y2).data().iter().enumerate() {
            let expect = (t.value(x1).data()[i] + t.value(x2).data()[i]) / sqrt2;
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn wn_add_shape_mismatch_is_error() {
        let mut t = Tape::new();
        let x1 = leaf(&mut t, vec![1, 2], vec![1.0, 2.0]);
        let x2 = leaf(&mut t, vec![2, 1], vec![1.0, 2.0]);
        let w = leaf(&mut t, vec![2], vec![1.0, 1.0]);
        assert!(wn_add(&mut t, w, w, x1, x2, 1, WN_EPS).is_err());
    }

    #[test]
    fn wn_conv_stride1_unit_kernel_passthrough() {
        // 1x1 kernel value 5, stride 1: y = 5*x / sqrt(25) = x
        let mut t = Tape::new();
        let k = leaf(&mut t, vec![1, 1, 1, 1], vec![5.0]);
        let x = leaf(&mut t, vec![1, 1, 2, 2], vec![2.0; 4]);
        let y = strict_wn_conv2d(&mut t, k, x, (1, 1), (0, 0), 0.0).unwrap();
        for v in t.value(y).data() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wn_conv_stride_correction_divides_by_stride_root() {
        // kernel of norm 2 at stride 2: divisor 2/sqrt(4) = 1, so the
        // effective kernel equals the raw kernel
        let mut t = Tape::new();
        let k = leaf(&mut t, vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]);
        let x = leaf(&mut t, vec![1, 1, 4, 4], (1..=16).map(f64::from).collect());
        let wn = strict_wn_conv2d(&mut t, k, x, (2, 2), (0, 0), 0.0).unwrap();
        let raw = t.conv2d(x, k, (2, 2), (0, 0)).unwrap();
        assert!(t.value(wn).max_abs_diff(t.value(raw)) < 1e-12);
    }

    #[test]
    fn wn_fc_first_is_strict_linear_plus_reshape() {
        let mut rng = DetRng::new(31);
        let (latent, channels, spatial) = (6, 4, 2);
        let mut wd = vec![0.0; channels * spatial * spatial * latent];
        let mut zd = vec![0.0; 2 * latent];
        rng.fill_normal(&mut wd);
        rng.fill_normal(&mut zd);
        let mut t = Tape::new();
        let w = leaf(&mut t, vec![channels * spatial * spatial, latent], wd);
        let z = leaf(&mut t, vec![2, latent], zd);
        let y = wn_fc_first(&mut t, w, z, channels, spatial, WN_EPS).unwrap();
        assert_eq!(t.value(y).shape(), &[2, channels, spatial, spatial]);
        let flat = strict_wn_linear(&mut t, w, z, WN_EPS).unwrap();
        assert_eq!(t.value(y).data(), t.value(flat).data());
    }

    #[test]
    fn batchnorm_train_rejects_batch_of_one() {
        let mut t = Tape::new();
        let g = leaf(&mut t, vec![2], vec![1.0, 1.0]);
        let b = leaf(&mut t, vec![2], vec![0.0, 0.0]);
        let x = leaf(&mut t, vec![1, 2], vec![1.0, 2.0]);
        assert!(batchnorm_train(&mut t, g, b, x, BN_EPS, false).is_err());
    }

    #[test]
    fn batchnorm_train_mode_statistics() {
        // batch with per-channel mean 5, std 2, gamma 1, beta 0 ->
        // output mean 0, std 1 (up to the eps inside the module's sigma)
        let mut rng = DetRng::new(77);
        let (n, c) = (512, 3);
        let mut xd = vec![0.0; n * c];
        for v in xd.iter_mut() {
            *v = rng.normal_scaled(5.0, 2.0);
        }
        let x_t = Tensor::from_vec(vec![n, c], xd).unwrap();

        let mut t = Tape::new();
        let g = leaf(&mut t, vec![c], vec![1.0; c]);
        let b = leaf(&mut t, vec![c], vec![0.0; c]);
        let x = t.leaf(x_t.clone());
        let (y, stats) = batchnorm_train(&mut t, g, b, x, BN_EPS, false).unwrap();

        for ch in 0..c {
            let col: Vec<f64> = (0..n).map(|i| t.value(y).data()[i * c + ch]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-12, "channel {ch} mean {mean}");
            // exact identity: var(y) = var(x) / (var(x) + eps)
            let vx: Vec<f64> = (0..n).map(|i| x_t.data()[i * c + ch]).collect();
            let mx = vx.iter().sum::<f64>() / n as f64;
            let vvar = vx.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / n as f64;
            let expect = vvar / (vvar + BN_EPS);
            assert!((var - expect).abs() < 1e-12, "channel {ch}: {var} vs {expect}");
            // and the plain std is 1 up to the eps-induced deflation
            assert!((var.sqrt() - 1.0).abs() < 1e-5, "channel {ch} std {}", var.sqrt());
            // reported stats are the batch statistics (unbiased variance)
            assert!((stats.mean[ch] - mx).abs() < 1e-12);
            assert!((stats.var[ch] - vvar * n as f64 / (n as f64 - 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_gamma_beta_reach_output_statistics() {
        // gamma 3, beta 7 -> output mean 7, std 3
        let mut rng = DetRng::new(78);
        let (n, c) = (1024, 2);
        let mut xd = vec![0.0; n * c];
        for v in xd.iter_mut() {
            *v = rng.normal_scaled(-1.0, 0.7);
        }
        let mut t = Tape::new();
        let g = leaf(&mut t, vec![c], vec![3.0; c]);
        let b = leaf(&mut t, vec![c], vec![7.0; c]);
        let x = leaf(&mut t, vec![n, c], xd);
        let (y, _) = batchnorm_train(&mut t, g, b, x, BN_EPS, false).unwrap();
        for ch in 0..c {
            let col: Vec<f64> = (0..n).map(|i| t.value(y).data()[i * c + ch]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            assert!((mean - 7.0).abs() < 1e-12, "mean {mean}");
            assert!((var.sqrt() - 3.0).abs() < 1e-4, "std {}", var.sqrt());
        }
    }

    #[test]
    fn mean_only_batchnorm_preserves_variance() {
        let mut rng = DetRng::new(79);
        let (n, c) = (1024, 2);
        let mut xd = vec![0.0; n * c];
        for v in xd.iter_mut() {
            *v = rng.normal_scaled(3.0, 2.0);
        }
        let x_t = Tensor::from_vec(vec![n, c], xd).unwrap();
        let mut t = Tape::new();
        let g = leaf(&mut t, vec![c], vec![1.0; c]);
        let b = leaf(&mut t, vec![c], vec![0.5; c]);
        let x = t.leaf(x_t.clone());
        let (y, _) = batchnorm_train(&mut t, g, b, x, BN_EPS, true).unwrap();
        for ch in 0..c {
            let col_in: Vec<f64> = (0..n).map(|i| x_t.data()[i * c + ch]).collect();
            let col_out: Vec<f64> = (0..n).map(|i| t.value(y).data()[i * c + ch]).collect();
            let var = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
            };
            assert!((var(&col_in) - var(&col_out)).abs() < 1e-6);
            let mean_out = col_out.iter().sum::<f64>() / n as f64;
            assert!((mean_out - 0.5).abs() < 1e-12, "mean {mean_out}");
        }
    }

    #[test]
    fn batchnorm_running_stats_update_with_momentum() {
        let mut bn = BatchNorm::init(2, false);
        bn.apply_update(&BnBatchStats {
            mean: vec![10.0, -10.0],
            var: vec![4.0, 9.0],
        });
        assert_eq!(bn.running_mean.data(), &[1.0, -1.0]);
        assert!((bn.running_var.data()[0] - (0.9 + 0.4)).abs() < 1e-15);
        assert!((bn.running_var.data()[1] - (0.9 + 0.9)).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_inference_uses_running_stats() {
        let mut bn = BatchNorm::init(1, false);
        bn.running_mean = Tensor::from_vec(vec![1], vec![2.0]).unwrap();
        bn.running_var = Tensor::from_vec(vec![1], vec![4.0]).unwrap();
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![1, 1], vec![4.0]);
        let (y, stats) = bn.forward(&mut t, x, Mode::Inference).unwrap();
        assert!(stats.is_none());
        let expect = (4.0 - 2.0) / (4.0 + BN_EPS).sqrt();
        assert!((t.value(y).data()[0] - expect).abs() < 1e-15);
    }
}
