//! Lipschitz properties of strict weight-normalized networks.
//!
//! Per layer, the L1 norm of the input gradient is bounded by a constant
//! times the L1 norm of the output gradient: `sqrt(n)` for a strict
//! weight-normalized linear layer with fan-in `n`, `sqrt(ci kw kh)` for a
//! strict convolution (multiplied by `sqrt(dw dh)` under the stride norm
//! correction, which inflates the effective kernel by that factor), and 1
//! for a translated parametric ReLU with slopes in [0,1]. The product K of
//! the factors bounds the whole network.
//!
//! For a scalar output f this means `|grad f|_1 <= K`, and by duality
//! `|f(a) - f(b)| <= K |a - b|_inf`: the empirical probe therefore
//! measures difference quotients against the sup-norm of the input
//! perturbation, including pairs aligned with `sign(grad f)` which
//! maximize that quotient.
//!
//! A weight-normalized discriminator becomes such a K-Lipschitz critic by
//! removing the sigmoid head and replacing the affine weight-normalized
//! final layer with a strict one.

use crate::error::{Error, Result};
use crate::layers::{self, Mode};
use crate::netbuild::{ForwardCtx, LayerSpec, Network, NetworkSpec, Variant};
use crate::rng::DetRng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use serde::Serialize;

/// Per-layer gradient-amplification factor.
#[derive(Debug, Clone, Serialize)]
pub struct LayerFactor {
    pub layer: String,
    pub factor: f64,
}

/// Product of per-layer factors bounding the critic's Lipschitz constant.
#[derive(Debug, Clone, Serialize)]
pub struct LipschitzBudget {
    pub factors: Vec<LayerFactor>,
    pub k: f64,
}

fn layer_factor(spec: &LayerSpec) -> Result<Option<LayerFactor>> {
    let unsupported = |what: &str| {
        Err(Error::InvalidArg(format!(
            "lipschitz budget: {what} has no gradient-sum bound; not a strict critic layer"
        )))
    };
    match spec {
        LayerSpec::StrictWnLinear { in_dim, .. } => Ok(Some(LayerFactor {
            layer: format!("strict_wn_linear(in={in_dim})"),
            factor: (*in_dim as f64).sqrt(),
        })),
        LayerSpec::WnFcFirst { latent, .. } => Ok(Some(LayerFactor {
            layer: format!("wn_fc(in={latent})"),
            factor: (*latent as f64).sqrt(),
        })),
        LayerSpec::WnConv {
            c_in,
            kernel,
            stride,
            affine,
            ..
        } => {
            if *affine {
                return unsupported("affine weight-normalized convolution");
            }
            // conservative: the stride norm correction scales the
            // effective kernel up by sqrt(dw dh)
            let fan = (*c_in * kernel * kernel) as f64;
            let factor = fan.sqrt() * ((stride * stride) as f64).sqrt();
            Ok(Some(LayerFactor {
                layer: format!("strict_wn_conv(ci={c_in},k={kernel},s={stride})"),
                factor,
            }))
        }
        LayerSpec::TPRelu { .. } | LayerSpec::PRelu { .. } => Ok(Some(LayerFactor {
            layer: "tprelu".into(),
            factor: 1.0,
        })),
        // averaging: sum of |gradient| over the window is exactly the
        // output gradient magnitude
        LayerSpec::AvgPool { .. } => Ok(Some(LayerFactor {
            layer: "avg_pool".into(),
            factor: 1.0,
        })),
        LayerSpec::Reshape { .. } => Ok(None),
        LayerSpec::Sigmoid => unsupported("sigmoid head"),
        LayerSpec::BatchNorm { .. } => unsupported("batch normalization"),
        other => unsupported(&format!("{other:?}")),
    }
}

/// Computes the Lipschitz budget of a strict weight-normalized critic.
pub fn budget_for_spec(spec: &NetworkSpec) -> Result<LipschitzBudget> {
    let mut factors = Vec::new();
    for layer in &spec.layers {
        if let Some(f) = layer_factor(layer)? {
            factors.push(f);
        }
    }
    let k = factors.iter().map(|f| f.factor).product();
    Ok(LipschitzBudget { factors, k })
}

/// Turns a weight-normalized discriminator into a WGAN critic: the sigmoid
/// head is removed and the single affine weight-normalized layer becomes
/// strict.
pub fn make_critic(disc: &NetworkSpec) -> Result<NetworkSpec> {
    if disc.variant != Variant::Wn {
        return Err(Error::InvalidArg(format!(
            "make_critic needs a weight-normalized discriminator, got {:?}",
            disc.variant
        )));
    }
    let mut layers_out = Vec::with_capacity(disc.layers.len());
    let mut affine_converted = 0usize;
    for layer in &disc.layers {
        match layer {
            LayerSpec::Sigmoid => {} // stripped
            LayerSpec::WnConv {
                c_in,
                c_out,
                kernel,
                stride,
                pad,
                affine: true,
            } => {
                affine_converted += 1;
                layers_out.push(LayerSpec::WnConv {
                    c_in: *c_in,
                    c_out: *c_out,
                    kernel: *kernel,
                    stride: *stride,
                    pad: *pad,
                    affine: false,
                });
            }
            LayerSpec::AffineWnLinear { in_dim, out_dim } => {
                affine_converted += 1;
                layers_out.push(LayerSpec::StrictWnLinear {
                    in_dim: *in_dim,
                    out_dim: *out_dim,
                });
            }
            other => layers_out.push(other.clone()),
        }
    }
    if affine_converted != 1 {
        return Err(Error::InvalidArg(format!(
            "make_critic expects exactly one affine weight-normalized layer, found {affine_converted}"
        )));
    }
    Ok(NetworkSpec {
        layers: layers_out,
        ..disc.clone()
    })
}

/// Layer families covered by the per-layer gradient-sum bound check.
#[derive(Debug, Clone, Copy)]
pub enum BoundLayer {
    StrictLinear { out_dim: usize, in_dim: usize },
    StrictConv { c_in: usize, c_out: usize, kernel: usize, stride: usize },
    TPRelu { channels: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub layer: String,
    pub trials: usize,
    pub factor: f64,
    pub max_ratio: f64,
    pub violations: usize,
    pub pass: bool,
}

const BOUND_SLACK: f64 = 1e-9;

/// Verifies `sum |dL/dx| <= factor * sum |dL/dy|` over random
/// (input, upstream-gradient) pairs, both sides computed by autodiff with
/// `L = sum(y * u)`.
pub fn check_gradient_bound(layer: BoundLayer, trials: usize, seed: u64) -> Result<BoundReport> {
    let mut rng = DetRng::new(seed);
    let (name, factor) = match layer {
        BoundLayer::StrictLinear { in_dim, .. } => {
            (format!("strict_wn_linear(in={in_dim})"), (in_dim as f64).sqrt())
        }
        BoundLayer::StrictConv {
            c_in,
            kernel,
            stride,
            ..
        } => (
            format!("strict_wn_conv(ci={c_in},k={kernel},s={stride})"),
            ((c_in * kernel * kernel) as f64).sqrt() * ((stride * stride) as f64).sqrt(),
        ),
        BoundLayer::TPRelu { .. } => ("tprelu".to_string(), 1.0),
    };

    let mut max_ratio: f64 = 0.0;
    let mut violations = 0usize;
    for trial in 0..trials {
        let mut tape = Tape::new();
        let (x, y) = match layer {
            BoundLayer::StrictLinear { out_dim, in_dim } => {
                let mut wd = vec![0.0; out_dim * in_dim];
                rng.fill_normal(&mut wd);
                // sprinkle tiny-norm weights: the eps term only shrinks
                // gradients and must never break the bound
                if trial % 7 == 0 {
                    for v in wd.iter_mut() {
                        *v *= 1e-4;
                    }
                }
                let w = tape.leaf(Tensor::from_vec(vec![out_dim, in_dim], wd).unwrap());
                let mut xd = vec![0.0; in_dim];
                rng.fill_normal(&mut xd);
                let x = tape.leaf(Tensor::from_vec(vec![1, in_dim], xd).unwrap());
                let y = layers::strict_wn_linear(&mut tape, w, x, layers::WN_EPS)?;
                (x, y)
            }
            BoundLayer::StrictConv {
                c_in,
                c_out,
                kernel,
                stride,
            } => {
                let mut kd = vec![0.0; c_out * c_in * kernel * kernel];
                rng.fill_normal(&mut kd);
                if trial % 7 == 0 {
                    for v in kd.iter_mut() {
                        *v *= 1e-4;
                    }
                }
                let k = tape.leaf(
                    Tensor::from_vec(vec![c_out, c_in, kernel, kernel], kd).unwrap(),
                );
                let side = 2 * kernel;
                let mut xd = vec![0.0; c_in * side * side];
                rng.fill_normal(&mut xd);
                let x = tape.leaf(Tensor::from_vec(vec![1, c_in, side, side], xd).unwrap());
                let y = layers::strict_wn_conv2d(
                    &mut tape,
                    k,
                    x,
                    (stride, stride),
                    (kernel / 2, kernel / 2),
                    layers::WN_EPS,
                )?;
                (x, y)
            }
            BoundLayer::TPRelu { channels } => {
                let mut ad = vec![0.0; channels];
                rng.fill_normal(&mut ad);
                let a = tape.leaf(Tensor::from_vec(vec![channels], ad).unwrap());
                let mut sd = vec![0.0; channels];
                rng.fill_uniform(&mut sd, 0.0, 1.0);
                let s = tape.leaf(Tensor::from_vec(vec![channels], sd).unwrap());
                let mut xd = vec![0.0; 2 * channels];
                rng.fill_normal(&mut xd);
                let x = tape.leaf(Tensor::from_vec(vec![2, channels], xd).unwrap());
                let y = layers::tprelu(&mut tape, a, s, x, 1)?;
                (x, y)
            }
        };
        let mut ud = vec![0.0; tape.value(y).numel()];
        rng.fill_normal(&mut ud);
        let u_t = Tensor::from_vec(tape.value(y).shape().to_vec(), ud).unwrap();
        let u = tape.leaf(u_t.clone());
        let prod = tape.mul(y, u)?;
        let loss = tape.sum(prod)?;
        tape.backward(loss)?;

        let gx_l1: f64 = tape.grad(x).data().iter().map(|v| v.abs()).sum();
        let u_l1: f64 = u_t.data().iter().map(|v| v.abs()).sum();
        if u_l1 == 0.0 {
            continue;
        }
        let ratio = gx_l1 / u_l1;
        max_ratio = max_ratio.max(ratio);
        if ratio > factor + BOUND_SLACK {
            violations += 1;
        }
    }
    Ok(BoundReport {
        layer: name,
        trials,
        factor,
        max_ratio,
        violations,
        pass: violations == 0,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub pairs: usize,
    pub skipped: usize,
    pub max_ratio: f64,
    pub k: f64,
    pub pass: bool,
}

fn critic_value(critic: &Network, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone());
    let staged = critic.stage(&mut tape);
    let mut ctx = ForwardCtx::default();
    let out = staged.forward(&mut tape, xn, Mode::Inference, &mut ctx)?;
    Ok(tape.value(out.out).data()[0])
}

fn critic_value_and_grad(critic: &Network, x: &Tensor) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone());
    let staged = critic.stage(&mut tape);
    let mut ctx = ForwardCtx::default();
    let out = staged.forward(&mut tape, xn, Mode::Inference, &mut ctx)?;
    let root = tape.sum(out.out)?;
    tape.backward(root)?;
    Ok((tape.value(out.out).data()[0], tape.grad(xn)))
}

/// Empirical Lipschitz probe: maximum of `|f(a) - f(b)| / |a - b|_inf`
/// over random pairs and gradient-aligned pairs, compared against the
/// budget K. Coincident pairs are skipped.
pub fn empirical_lipschitz(
    critic: &Network,
    k: f64,
    pairs: usize,
    seed: u64,
) -> Result<ProbeReport> {
    let mut rng = DetRng::new(seed);
    let mut shape = vec![1];
    shape.extend_from_slice(&critic.spec.input_shape);
    let numel: usize = shape.iter().product();

    let mut max_ratio: f64 = 0.0;
    let mut skipped = 0usize;
    for pair in 0..pairs {
        let mut ad = vec![0.0; numel];
        rng.fill_uniform(&mut ad, 0.0, 1.0);
        let a = Tensor::from_vec(shape.clone(), ad)?;
        let b = if pair % 2 == 0 {
            // perturb along sign(grad f): the maximizer of the
            // difference quotient under the sup-norm metric
            let (_, g) = critic_value_and_grad(critic, &a)?;
            let delta = 1e-3;
            let bd: Vec<f64> = a
                .data()
                .iter()
                .zip(g.data().iter())
                .map(|(v, gv)| v + delta * gv.signum())
                .collect();
            Tensor::from_vec(shape.clone(), bd)?
        } else {
            let mut bd = vec![0.0; numel];
            rng.fill_uniform(&mut bd, 0.0, 1.0);
            Tensor::from_vec(shape.clone(), bd)?
        };
        let dist = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        if dist == 0.0 {
            skipped += 1;
            continue;
        }
        let fa = critic_value(critic, &a)?;
        let fb = critic_value(critic, &b)?;
        max_ratio = max_ratio.max((fa - fb).abs() / dist);
    }
    Ok(ProbeReport {
        pairs,
        skipped,
        max_ratio,
        k,
        pass: max_ratio <= k * (1.0 + 1e-9) + BOUND_SLACK,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netbuild::{build_dcgan, Layer, Role};

    #[test]
    fn critic_strips_sigmoid_and_affine() {
        let (d, _) = build_dcgan(Variant::Wn, 16, 4, 8, 4).unwrap();
        let critic = make_critic(&d).unwrap();
        assert!(!critic
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Sigmoid)));
        for l in &critic.layers {
            if let LayerSpec::WnConv { affine, .. } = l {
                assert!(!affine);
            }
        }
        // non-WN spec rejected
        let (dv, _) = build_dcgan(Variant::Vanilla, 16, 4, 8, 4).unwrap();
        assert!(make_critic(&dv).is_err());
    }

    #[test]
    fn critic_output_is_unbounded_scalar() {
        let (d, _) = build_dcgan(Variant::Wn, 8, 4, 6, 2).unwrap();
        let critic_spec = make_critic(&d).unwrap();
        let mut rng = DetRng::new(4);
        let mut critic = Network::init(&critic_spec, &mut rng);
        // push the final layer weights up so |f| clears 1, impossible
        // under a sigmoid head
        critic.visit_params_mut(&mut |path, _, t| {
            if path.starts_with("l4") {
                for v in t.data_mut() {
                    *v = 0.5;
                }
            }
        });
        let x = Tensor::full(vec![1, 3, 8, 8], 1.0);
        let v = critic_value(&critic, &x).unwrap();
        assert!(v.abs() > 1.0, "critic value {v} looks squashed");
    }

    #[test]
    fn budget_multiplies_per_layer_factors() {
        let (d, _) = build_dcgan(Variant::Wn, 16, 4, 8, 4).unwrap();
        let critic = make_critic(&d).unwrap();
        let budget = budget_for_spec(&critic).unwrap();
        // conv factors: sqrt(ci*k*k)*stride for the stride-2 layers, then
        // the full-extent stride-1 layer; tprelu factors are 1
        let expect: f64 = [
            (3.0 * 16.0f64).sqrt() * 2.0,
            (4.0 * 16.0f64).sqrt() * 2.0,
            (8.0 * 16.0f64).sqrt(),
        ]
        .iter()
        .product();
        assert!((budget.k - expect).abs() < 1e-9, "{} vs {expect}", budget.k);
        // adding a strict layer multiplies the budget by its factor
        let mut deeper = critic.clone();
        deeper.layers.push(LayerSpec::StrictWnLinear {
            in_dim: 9,
            out_dim: 1,
        });
        let budget2 = budget_for_spec(&deeper).unwrap();
        assert!((budget2.k - budget.k * 3.0).abs() < 1e-9);
        // a sigmoid head has no bound
        let mut with_sigmoid = critic.clone();
        with_sigmoid.layers.push(LayerSpec::Sigmoid);
        assert!(budget_for_spec(&with_sigmoid).is_err());
    }

    #[test]
    fn linear_bound_holds_on_every_trial() {
        let report = check_gradient_bound(
            BoundLayer::StrictLinear {
                out_dim: 4,
                in_dim: 9,
            },
            500,
            11,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.max_ratio <= 3.0 + 1e-9, "{}", report.max_ratio);
    }

    #[test]
    fn tprelu_bound_is_one() {
        let report = check_gradient_bound(BoundLayer::TPRelu { channels: 6 }, 500, 12).unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.max_ratio <= 1.0 + 1e-9);
    }

    #[test]
    fn conv_bound_holds_with_stride_correction() {
        let report = check_gradient_bound(
            BoundLayer::StrictConv {
                c_in: 2,
                c_out: 3,
                kernel: 4,
                stride: 2,
            },
            300,
            13,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn unit_basis_row_reaches_the_bound_with_equality() {
        // single output, w = e1: dL/dx = u * e1, so the ratio is exactly 1
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap());
        let x = tape.leaf(Tensor::from_vec(vec![1, 3], vec![0.3, -0.7, 2.0]).unwrap());
        let y = layers::strict_wn_linear(&mut tape, w, x, 0.0).unwrap();
        let u = tape.leaf(Tensor::from_vec(vec![1, 1], vec![2.5]).unwrap());
        let prod = tape.mul(y, u).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        let gx: f64 = tape.grad(x).data().iter().map(|v| v.abs()).sum();
        assert!((gx / 2.5 - 1.0).abs() < 1e-12);
    }

    fn linear_critic(rows_equal: bool, inflate: Option<f64>) -> (Network, f64) {
        // strict linear -> tprelu(slope 1, identity) -> strict linear;
        // all-ones weights align gradients so the bound is tight
        let (m, n) = (4usize, 4usize);
        let spec = NetworkSpec {
            role: Role::Discriminator,
            variant: Variant::Wn,
            input_shape: vec![n],
            output_shape: vec![1],
            latent_dim: 1,
            layers: vec![
                LayerSpec::StrictWnLinear { in_dim: n, out_dim: m },
                LayerSpec::TPRelu { channels: m },
                LayerSpec::StrictWnLinear { in_dim: m, out_dim: 1 },
            ],
        };
        let mut net = Network::init(&spec, &mut DetRng::new(1));
        net.visit_params_mut(&mut |path, kind, t| {
            use crate::netbuild::ParamKind;
            match kind {
                ParamKind::Weight => {
                    for (i, v) in t.data_mut().iter_mut().enumerate() {
                        *v = if rows_equal {
                            // every row e1: the network only reads x[0]
                            if i % n == 0 { 1.0 } else { 0.0 }
                        } else {
                            1.0
                        };
                    }
                }
                ParamKind::Slope => {
                    for v in t.data_mut() {
                        *v = 1.0;
                    }
                }
                ParamKind::Alpha => {
                    for v in t.data_mut() {
                        *v = 0.0;
                    }
                }
                _ => panic!("unexpected param {path}"),
            }
        });
        if let Some(scale) = inflate {
            // inject an unaccounted scaling layer between the two linear
            // layers: running variance 1/scale^2 turns inference-mode
            // normalization into multiplication by ~scale
            let mut bn = layers::BatchNorm::init(m, false);
            bn.eps = 0.0;
            bn.running_var = Tensor::full(vec![m], 1.0 / (scale * scale));
            net.layers.insert(2, Layer::BatchNorm(bn));
        }
        let k = ((n as f64).sqrt()) * ((m as f64).sqrt());
        (net, k)
    }

    #[test]
    fn probe_stays_under_budget_for_aligned_weights() {
        let (net, k) = linear_critic(false, None);
        let report = empirical_lipschitz(&net, k, 400, 21).unwrap();
        assert!(report.pass, "{report:?}");
        // all-ones weights make the bound tight: sum|grad| = sqrt(n*m)
        assert!(report.max_ratio > k * 0.95, "{} vs {k}", report.max_ratio);
    }

    #[test]
    fn probe_is_well_below_budget_for_sparse_rows() {
        let (net, k) = linear_critic(true, None);
        let report = empirical_lipschitz(&net, k, 200, 22).unwrap();
        assert!(report.pass);
        assert!(report.max_ratio < k * 0.5, "{} vs {k}", report.max_ratio);
    }

    #[test]
    fn injected_scaling_layer_is_flagged() {
        let (net, k) = linear_critic(false, Some(3.0));
        let report = empirical_lipschitz(&net, k, 100, 23).unwrap();
        assert!(!report.pass, "violation not flagged: {report:?}");
        assert!(report.max_ratio > k * 2.0);
    }
}
