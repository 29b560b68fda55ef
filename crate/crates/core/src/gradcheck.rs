//! Central finite-difference gradient oracle.
//!
//! [`finite_diff_grad`] evaluates a scalar function on plain tensors and
//! never touches the tape, so it stays an independent reference for every
//! autodiff gradient in the crate.

use crate::error::{Error, Result};
use crate::layers;
use crate::rng::DetRng;
use crate::tape::{NodeId, Tape};
use crate::tensor::{grad_close, Tensor};

/// Default step size; paired with the crate-wide 1e-4 relative tolerance.
pub const DEFAULT_H: f64 = 1e-6;

/// Relative tolerance for autodiff-vs-finite-difference agreement.
pub const REL_TOL: f64 = 1e-4;
/// Elements with |reference| below this are compared absolutely.
pub const ABS_SWITCH: f64 = 1e-8;
/// Absolute tolerance for near-zero elements.
pub const ABS_TOL: f64 = 1e-6;

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` per
/// coordinate.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if h <= 0.0 {
        return Err(Error::InvalidArg(format!("finite_diff_grad: h = {h} must be > 0")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for (i, slot) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_grad",
                detail: format!("f non-finite at coordinate {i}"),
            });
        }
        *slot = (fp - fm) / (2.0 * h);
    }
    Tensor::from_vec(x.shape().to_vec(), grad)
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
    pub pass: bool,
    pub failure: Option<String>,
}

/// Checks autodiff against finite differences for a scalar function of one
/// tensor input. `build` must construct the loss for the given input value
/// on the supplied tape and return the scalar root.
pub fn check_scalar_fn(
    name: &str,
    build: &mut dyn FnMut(&mut Tape, NodeId) -> Result<NodeId>,
    x: &Tensor,
    h: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone());
    let root = build(&mut tape, xn)?;
    tape.backward(root)?;
    let analytic = tape.grad(xn);

    let mut eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let p = t.leaf(probe.clone());
        let r = build(&mut t, p)?;
        Ok(t.value(r).item())
    };
    let numeric = finite_diff_grad(&mut eval, x, h)?;

    let mut max_rel: f64 = 0.0;
    for (&a, &n) in analytic.data().iter().zip(numeric.data().iter()) {
        if a.abs() >= ABS_SWITCH || n.abs() >= ABS_SWITCH {
            max_rel = max_rel.max((a - n).abs() / n.abs().max(a.abs()));
        }
    }
    let failure = grad_close(&analytic, &numeric, REL_TOL, ABS_SWITCH, ABS_TOL).err();
    Ok(GradCheckReport {
        name: name.to_string(),
        points: 1,
        max_rel_err: max_rel,
        pass: failure.is_none(),
        failure,
    })
}

/// Merges per-point reports into one per-layer line.
pub fn merge_reports(name: &str, reports: &[GradCheckReport]) -> GradCheckReport {
    let max_rel = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failure = reports.iter().find_map(|r| r.failure.clone());
    GradCheckReport {
        name: name.to_string(),
        points: reports.len(),
        max_rel_err: max_rel,
        pass: failure.is_none(),
        failure,
    }
}

/// Checks the gradient of a scalar function of several tensors against
/// finite differences, one input at a time.
pub fn check_multi(
    name: &str,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    h: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &ids)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| tape.grad(id)).collect();

    let mut max_rel: f64 = 0.0;
    let mut failure = None;
    for (i, x) in inputs.iter().enumerate() {
        let mut eval = |probe: &Tensor| -> Result<f64> {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = inputs
                .iter()
                .enumerate()
                .map(|(j, inp)| t.leaf(if j == i { probe.clone() } else { inp.clone() }))
                .collect();
            let r = build(&mut t, &ids)?;
            Ok(t.value(r).item())
        };
        let numeric = finite_diff_grad(&mut eval, x, h)?;
        for (&a, &n) in analytic[i].data().iter().zip(numeric.data().iter()) {
            if a.abs() >= ABS_SWITCH || n.abs() >= ABS_SWITCH {
                max_rel = max_rel.max((a - n).abs() / n.abs().max(a.abs()));
            }
        }
        if failure.is_none() {
            failure = grad_close(&analytic[i], &numeric, REL_TOL, ABS_SWITCH, ABS_TOL)
                .err()
                .map(|e| format!("input {i}: {e}"));
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        points: 1,
        max_rel_err: max_rel,
        pass: failure.is_none(),
        failure,
    })
}

// ── per-layer gradient suite ────────────────────────────────────────────

fn normal_tensor(rng: &mut DetRng, shape: Vec<usize>) -> Tensor {
    let mut data = vec![0.0; shape.iter().product()];
    rng.fill_normal(&mut data);
    Tensor::from_vec(shape, data).unwrap()
}

fn uniform_tensor(rng: &mut DetRng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let mut data = vec![0.0; shape.iter().product()];
    rng.fill_uniform(&mut data, lo, hi);
    Tensor::from_vec(shape, data).unwrap()
}

/// Pushes every element of `x` away from its channel's kink location so a
/// finite-difference probe never crosses the non-smooth point.
fn nudge_from_kink(x: &mut Tensor, kink_per_channel: &Tensor, channel_axis: usize, margin: f64) {
    let shape = x.shape().to_vec();
    let inner: usize = shape[channel_axis + 1..].iter().product();
    let c = shape[channel_axis];
    let kinks = kink_per_channel.data().to_vec();
    for (flat, v) in x.data_mut().iter_mut().enumerate() {
        let ch = (flat / inner) % c;
        let d = *v - kinks[ch];
        if d.abs() < margin {
            *v = kinks[ch] + if d >= 0.0 { margin } else { -margin };
        }
    }
}

/// Scalar probe loss mixing the layer output linearly and quadratically
/// with a fixed random direction. Scaled down so the finite-difference
/// noise floor (machine epsilon times the loss magnitude over the step)
/// stays far below the absolute comparison threshold even for gradient
/// elements near the relative/absolute switch.
fn probe_loss(tape: &mut Tape, y: NodeId, direction: &Tensor) -> Result<NodeId> {
    let r = tape.leaf(direction.clone());
    let lin = tape.mul(y, r)?;
    let lin_sum = tape.sum(lin)?;
    let sq = tape.mul(y, y)?;
    let sq_sum = tape.sum(sq)?;
    let half = tape.mul_scalar(sq_sum, 0.5)?;
    let raw = tape.add(lin_sum, half)?;
    tape.mul_scalar(raw, 1e-4)
}

/// One gradient check per layer family per random point; every
/// differentiable argument (inputs and parameters) is checked.
pub fn gradient_suite(points: usize, seed: u64, only: Option<&str>) -> Result<Vec<GradCheckReport>> {
    let mut rng = DetRng::new(seed);
    let mut reports = Vec::new();

    type Case = (
        &'static str,
        Box<dyn Fn(&mut DetRng) -> (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>)>,
    );

    let cases: Vec<Case> = vec![
        (
            "strict_wn_linear",
            Box::new(|rng| {
                let w = normal_tensor(rng, vec![4, 6]);
                let x = normal_tensor(rng, vec![3, 6]);
                let dir = normal_tensor(rng, vec![3, 4]);
                (
                    vec![w, x],
                    Box::new(move |tape, ids| {
                        let y = layers::strict_wn_linear(tape, ids[0], ids[1], layers::WN_EPS)?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
        (
            "affine_wn_linear",
            Box::new(|rng| {
                let w = normal_tensor(rng, vec![4, 6]);
                let g = normal_tensor(rng, vec![4]);
                let b = normal_tensor(rng, vec![4]);
                let x = normal_tensor(rng, vec![3, 6]);
                let dir = normal_tensor(rng, vec![3, 4]);
                (
                    vec![w, g, b, x],
                    Box::new(move |tape, ids| {
                        let y = layers::affine_wn_linear(
                            tape,
                            ids[0],
                            ids[1],
                            ids[2],
                            ids[3],
                            layers::WN_EPS,
                        )?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
        (
            "linear",
            Box::new(|rng| {
                let w = normal_tensor(rng, vec![4, 5]);
                let b = normal_tensor(rng, vec![4]);
                let x = normal_tensor(rng, vec![3, 5]);
                let dir = normal_tensor(rng, vec![3, 4]);
                (
                    vec![w, b, x],
                    Box::new(move |tape, ids| {
                        let y = layers::linear(tape, ids[0], Some(ids[1]), ids[2])?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
        (
            "wn_conv2d_stride1",
            Box::new(|rng| {
                let k = normal_tensor(rng, vec![2, 2, 3, 3]);
                let x = normal_tensor(rng, vec![1, 2, 5, 5]);
                let dir = normal_tensor(rng, vec![1, 2, 5, 5]);
                (
                    vec![k, x],
                    Box::new(move |tape, ids| {
                        let y = layers::strict_wn_conv2d(
                            tape,
                            ids[0],
                            ids[1],
                            (1, 1),
                            (1, 1),
                            layers::WN_EPS,
                        )?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
        (
            "wn_conv2d_stride2",
            Box::new(|rng| {
                let k = normal_tensor(rng, vec![3, 2, 4, 4]);
                let x = normal_tensor(rng, vec![1, 2, 6, 6]);
                let dir = normal_tensor(rng, vec![1, 3, 3, 3]);
                (
                    vec![k, x],
                    Box::new(move |tape, ids| {
                        let y = layers::strict_wn_conv2d(
                            tape,
                            ids[0],
                            ids[1],
                            (2, 2),
                            (1, 1),
                            layers::WN_EPS,
                        )?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
        (
            "wn_conv2d_affine",
            Box::new(|rng| {
                let k = normal_tensor(rng, vec![2, 2, 3, 3]);
                let g = normal_tensor(rng, vec![2]);
                let b = normal_tensor(rng, vec![2]);
                let x = normal_tensor(rng, vec![1, 2, 4, 4]);
                let dir = normal_tensor(rng, vec![1, 2, 4, 4]);
                (
                    vec![k, g, b, x],
                    Box::new(move |tape, ids| {
                        let y = layers::strict_wn_conv2d(
                            tape,
                            ids[0],
                            ids[3],
                            (1, 1),
                            (1, 1),
                            layers::WN_EPS,
                        )?;
                        let y = layers::channel_affine(tape, y, ids[1], ids[2])?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
        (
            "wn_conv_transpose2d",
            Box::new(|rng| {
                let k = normal_tensor(rng, vec![2, 3, 4, 4]);
                let x = normal_tensor(rng, vec![1, 2, 3, 3]);
                let dir = normal_tensor(rng, vec![1, 3, 6, 6]);
                (
                    vec![k, x],
                    Box::new(move |tape, ids| {
                        let y = layers::strict_wn_conv_transpose2d(
                            tape,
                            ids[0],
                            ids[1],
                            (2, 2),
                            (1, 1),
                            layers::WN_EPS,
                        )?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
        (
            "conv2d",
            Box::new(|rng| {
                let k = normal_tensor(rng, vec![2, 2, 3, 3]);
                let b = normal_tensor(rng, vec![2]);
                let x = normal_tensor(rng, vec![1, 2, 5, 5]);
                let dir = normal_tensor(rng, vec![1, 2, 5, 5]);
                (
                    vec![k, b, x],
                    Box::new(move |tape, ids| {
                        let y = tape.conv2d(ids[2], ids[0], (1, 1), (1, 1))?;
                        let y = tape.add_channel(y, ids[1], 1)?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
        (
            "conv_transpose2d",
            Box::new(|rng| {
                let k = normal_tensor(rng, vec![2, 3, 4, 4]);
                let b = normal_tensor(rng, vec![3]);
                let x = normal_tensor(rng, vec![1, 2, 3, 3]);
                let dir = normal_tensor(rng, vec![1, 3, 6, 6]);
                (
                    vec![k, b, x],
                    Box::new(move |tape, ids| {
                        let y = tape.conv2d_transposed(ids[2], ids[0], (2, 2), (1, 1))?;
                        let y = tape.add_channel(y, ids[1], 1)?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
        (
            "wn_fc_first",
            Box::new(|rng| {
                let (latent, channels, spatial) = (5, 3, 2);
                let w = normal_tensor(rng, vec![channels * spatial * spatial, latent]);
                let z = normal_tensor(rng, vec![2, latent]);
                let dir = normal_tensor(rng, vec![2, channels, spatial, spatial]);
                (
                    vec![w, z],
                    Box::new(move |tape, ids| {
                        let y =
                            layers::wn_fc_first(tape, ids[0], ids[1], channels, spatial, layers::WN_EPS)?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
        (
            "tprelu",
            Box::new(|rng| {
                let alpha = normal_tensor(rng, vec![4]);
                let slope = uniform_tensor(rng, vec![4], 0.0, 1.0);
                let mut x = normal_tensor(rng, vec![3, 4]);
                nudge_from_kink(&mut x, &alpha, 1, 1e-3);
                let dir = normal_tensor(rng, vec![3, 4]);
                (
                    vec![alpha, slope, x],
                    Box::new(move |tape, ids| {
                        let y = layers::tprelu(tape, ids[0], ids[1], ids[2], 1)?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
        (
            "prelu",
            Box::new(|rng| {
                let slope = uniform_tensor(rng, vec![4], 0.0, 1.0);
                let mut x = normal_tensor(rng, vec![3, 4]);
                nudge_from_kink(&mut x, &Tensor::zeros(vec![4]), 1, 1e-3);
                let dir = normal_tensor(rng, vec![3, 4]);
                (
                    vec![slope, x],
                    Box::new(move |tape, ids| {
                        let y = layers::prelu(tape, ids[0], ids[1], 1)?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
        (
            "batchnorm_train",
            Box::new(|rng| {
                let g = uniform_tensor(rng, vec![3], 0.5, 2.0);
                let b = normal_tensor(rng, vec![3]);
                let x = normal_tensor(rng, vec![6, 3]);
                let dir = normal_tensor(rng, vec![6, 3]);
                (
                    vec![g, b, x],
                    Box::new(move |tape, ids| {
                        let (y, _) = layers::batchnorm_train(
                            tape,
                            ids[0],
                            ids[1],
                            ids[2],
                            layers::BN_EPS,
                            false,
                        )?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
        (
            "batchnorm_mean_only",
            Box::new(|rng| {
                let g = uniform_tensor(rng, vec![3], 0.5, 2.0);
                let b = normal_tensor(rng, vec![3]);
                let x = normal_tensor(rng, vec![6, 3]);
                let dir = normal_tensor(rng, vec![6, 3]);
                (
                    vec![g, b, x],
                    Box::new(move |tape, ids| {
                        let (y, _) = layers::batchnorm_train(
                            tape,
                            ids[0],
                            ids[1],
                            ids[2],
                            layers::BN_EPS,
                            true,
                        )?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
        (
            "batchnorm_infer",
            Box::new(|rng| {
                let g = uniform_tensor(rng, vec![3], 0.5, 2.0);
                let b = normal_tensor(rng, vec![3]);
                let x = normal_tensor(rng, vec![4, 3]);
                let rm = normal_tensor(rng, vec![3]);
                let rv = uniform_tensor(rng, vec![3], 0.25, 4.0);
                let dir = normal_tensor(rng, vec![4, 3]);
                (
                    vec![g, b, x],
                    Box::new(move |tape, ids| {
                        let y = layers::batchnorm_infer(
                            tape,
                            ids[0],
                            ids[1],
                            &rm,
                            &rv,
                            ids[2],
                            layers::BN_EPS,
                            false,
                        )?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
        (
            "wn_add",
            Box::new(|rng| {
                let w1 = normal_tensor(rng, vec![3]);
                let w2 = normal_tensor(rng, vec![3]);
                let x1 = normal_tensor(rng, vec![2, 3]);
                let x2 = normal_tensor(rng, vec![2, 3]);
                let dir = normal_tensor(rng, vec![2, 3]);
                (
                    vec![w1, w2, x1, x2],
                    Box::new(move |tape, ids| {
                        let y = layers::wn_add(
                            tape,
                            ids[0],
                            ids[1],
                            ids[2],
                            ids[3],
                            1,
                            layers::WN_EPS,
                        )?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
        (
            "elementwise_ops",
            Box::new(|rng| {
                // add/sub/mul/div plus the scalar ops and mean in one chain
                let a = normal_tensor(rng, vec![3, 4]);
                let b = normal_tensor(rng, vec![3, 4]);
                let mut c = normal_tensor(rng, vec![3, 4]);
                for v in c.data_mut() {
                    // keep the divisor clear of zero for the probes
                    if v.abs() < 0.5 {
                        *v = if *v >= 0.0 { 0.5 } else { -0.5 };
                    }
                }
                let dir = normal_tensor(rng, vec![3, 4]);
                (
                    vec![a, b, c],
                    Box::new(move |tape, ids| {
                        let s = tape.add(ids[0], ids[1])?;
                        let d = tape.sub(ids[0], ids[1])?;
                        let p = tape.mul(s, d)?;
                        let q = tape.div(p, ids[2])?;
                        let shifted = tape.add_scalar(q, 0.75)?;
                        let scaled = tape.mul_scalar(shifted, 1.5)?;
                        let m = tape.mean(scaled)?;
                        let lifted = tape.reshape(scaled, vec![12])?;
                        let lin = probe_loss(tape, lifted, &dir.reshaped(vec![12]).unwrap())?;
                        tape.add(lin, m)
                    }),
                )
            }),
        ),
        (
            "sigmoid",
            Box::new(|rng| {
                let x = normal_tensor(rng, vec![3, 4]);
                let dir = normal_tensor(rng, vec![3, 4]);
                (
                    vec![x],
                    Box::new(move |tape, ids| {
                        let y = tape.sigmoid(ids[0])?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
        (
            "softplus",
            Box::new(|rng| {
                let x = normal_tensor(rng, vec![3, 4]);
                let dir = normal_tensor(rng, vec![3, 4]);
                (
                    vec![x],
                    Box::new(move |tape, ids| {
                        let y = tape.softplus(ids[0])?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
        (
            "avg_pool2d",
            Box::new(|rng| {
                let x = normal_tensor(rng, vec![2, 2, 4, 4]);
                let dir = normal_tensor(rng, vec![2, 2, 2, 2]);
                (
                    vec![x],
                    Box::new(move |tape, ids| {
                        let y = tape.avg_pool2d(ids[0], 2)?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
        (
            "nearest_upscale2d",
            Box::new(|rng| {
                let x = normal_tensor(rng, vec![2, 2, 3, 3]);
                let dir = normal_tensor(rng, vec![2, 2, 6, 6]);
                (
                    vec![x],
                    Box::new(move |tape, ids| {
                        let y = tape.nearest_upscale2d(ids[0], 2)?;
                        probe_loss(tape, y, &dir)
                    }),
                )
            }),
        ),
    ];

    for (name, make) in &cases {
        if let Some(filter) = only {
            if *name != filter {
                continue;
            }
        }
        let mut point_reports = Vec::with_capacity(points);
        for _ in 0..points {
            let (inputs, build) = make(&mut rng);
            point_reports.push(check_multi(name, &inputs, build.as_ref(), DEFAULT_H)?);
        }
        reports.push(merge_reports(name, &point_reports));
    }
    if reports.is_empty() {
        return Err(Error::InvalidArg(format!(
            "no layer named '{}' in the gradient suite",
            only.unwrap_or("")
        )));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    #[test]
    fn sum_of_squares_gradient() {
        // f(x) = sum x^2 at [1,2] -> [2,4]
        let mut f = |x: &Tensor| Ok(x.data().iter().map(|v| v * v).sum());
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(&mut f, &x, 1e-6).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8, "{:?}", g.data());
        assert!((g.data()[1] - 4.0).abs() < 1e-8, "{:?}", g.data());
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut f = |_: &Tensor| Ok(42.0);
        let x = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = finite_diff_grad(&mut f, &x, 1e-6).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_non_positive_step() {
        let mut f = |_: &Tensor| Ok(0.0);
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_grad(&mut f, &x, 0.0).is_err());
    }

    #[test]
    fn reports_non_finite_coordinate() {
        let mut f = |x: &Tensor| Ok(1.0 / (x.data()[1] - 2.0));
        let x = Tensor::from_vec(vec![3], vec![0.0, 2.0 - 1e-6, 0.0]).unwrap();
        // probing coordinate 1 upward lands exactly on the pole
        let err = finite_diff_grad(&mut f, &x, 1e-6).unwrap_err().to_string();
        assert!(err.contains("coordinate 1"), "{err}");
    }

    #[test]
    fn gradient_suite_passes_at_a_few_points() {
        let reports = gradient_suite(3, 1234, None).unwrap();
        assert!(reports.len() > 15);
        for r in &reports {
            assert!(r.pass, "{}: {:?}", r.name, r.failure);
            assert!(r.max_rel_err < REL_TOL, "{}: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn gradient_suite_filter_selects_one_layer() {
        let reports = gradient_suite(2, 1, Some("tprelu")).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].name, "tprelu");
        assert!(gradient_suite(1, 1, Some("nonexistent")).is_err());
    }

    #[test]
    fn sigmoid_dot_product_matches_backward() {
        let mut rng = DetRng::new(9);
        let mut wd = vec![0.0; 6];
        let mut xd = vec![0.0; 6];
        rng.fill_normal(&mut wd);
        rng.fill_normal(&mut xd);
        let w = Tensor::from_vec(vec![1, 6], wd).unwrap();
        let x = Tensor::from_vec(vec![6, 1], xd).unwrap();

        let report = check_scalar_fn(
            "sigmoid(w.x)",
            &mut |tape, xn| {
                let wn = tape.leaf(w.clone());
                let y = tape.matmul(wn, xn)?;
                let s = tape.sigmoid(y)?;
                tape.sum(s)
            },
            &x,
            DEFAULT_H,
        )
        .unwrap();
        assert!(report.pass, "{:?}", report.failure);
        assert!(report.max_rel_err < 1e-5, "{}", report.max_rel_err);
    }
}
