//! Exact transformation between a non-normalized stack (linear layers with
//! biases and parametric ReLU activations) and a weight-normalized stack
//! (strict weight-normalized layers with translated parametric ReLU and a
//! single affine weight-normalized layer at the end).
//!
//! The per-unit map is
//!
//! ```text
//! w' = w,  alpha' = -alpha/|w|,  beta' = beta + alpha*gamma,  gamma' = |w|*gamma
//! ```
//!
//! with the inverse `alpha = -|w'| alpha'`, `beta = beta' + alpha' gamma'`,
//! `gamma = gamma'/|w'|`. Applied pair by pair with the produced affine
//! folded into the next linear layer, it rewrites an entire stack without
//! changing the computed function. The forwards here use exact row norms
//! (no stability epsilon): that is the form the correspondence is exact
//! for, and zero-norm rows are rejected instead.
//!
//! The identity extends from plain ReLU to the parametric family because
//! `PReLU_s(a x) = a PReLU_s(x)` for `a >= 0`; the slope carries over
//! unchanged.

// indexed loops mirror the row/column algebra here
#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tensor::Tensor;

/// Non-normalized stack: `n+1` linear layers with biases, parametric ReLU
/// with per-unit slopes between them.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpStack {
    pub weights: Vec<Tensor>, // n+1 matrices [out, in]
    pub biases: Vec<Tensor>,  // n+1 vectors [out]
    pub slopes: Vec<Tensor>,  // n vectors [out of pair k]
}

/// Weight-normalized stack: `n` strict layers with translated parametric
/// ReLU, then one affine weight-normalized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct WnStack {
    pub weights: Vec<Tensor>, // n strict weight matrices
    pub alphas: Vec<Tensor>,  // n translation vectors
    pub slopes: Vec<Tensor>,  // n slope vectors
    pub final_weight: Tensor, // affine layer weight
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
}

impl MlpStack {
    pub fn depth(&self) -> usize {
        self.weights.len() + self.slopes.len()
    }
}

fn row_norm(w: &Tensor, row: usize) -> f64 {
    let cols = w.shape()[1];
    w.data()[row * cols..(row + 1) * cols]
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn row_norms(w: &Tensor, op: &'static str) -> Result<Vec<f64>> {
    (0..w.shape()[0])
        .map(|r| {
            let n = row_norm(w, r);
            if n == 0.0 {
                Err(Error::InvalidArg(format!(
                    "{op}: zero-norm weight row {r}, transformation undefined"
                )))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Per-unit forward map: `(|w|, alpha, gamma, beta) -> (alpha', beta', gamma')`.
pub fn lemma_map_forward(w_row: &[f64], alpha: f64, gamma: f64, beta: f64) -> Result<(f64, f64, f64)> {
    let norm = w_row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidArg(
            "lemma map: zero-norm weight row, transformation undefined".into(),
        ));
    }
    Ok((-alpha / norm, beta + alpha * gamma, norm * gamma))
}

/// Per-unit inverse map: `(|w'|, alpha', gamma', beta') -> (alpha, beta, gamma)`.
pub fn lemma_map_inverse(
    w_row: &[f64],
    alpha_p: f64,
    gamma_p: f64,
    beta_p: f64,
) -> Result<(f64, f64, f64)> {
    let norm = w_row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidArg(
            "lemma map: zero-norm weight row, transformation undefined".into(),
        ));
    }
    Ok((-norm * alpha_p, beta_p + alpha_p * gamma_p, gamma_p / norm))
}

/// Folds a preceding affine `y = g*x + h` into a linear layer:
/// `W(g*x + h) + b = (W diag(g)) x + (W h + b)`.
fn fold_affine(w: &Tensor, b: &Tensor, g: &[f64], h: &[f64]) -> (Tensor, Tensor) {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut wd = w.data().to_vec();
    let mut bd = b.data().to_vec();
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            acc += w.data()[r * cols + c] * h[c];
            wd[r * cols + c] *= g[c];
        }
        bd[r] += acc;
    }
    (
        Tensor::from_vec(vec![rows, cols], wd).unwrap(),
        Tensor::from_vec(vec![rows], bd).unwrap(),
    )
}

/// Unfolds: recovers `W` and `b` from the folded form.
fn unfold_affine(w_folded: &Tensor, b_folded: &Tensor, g: &[f64], h: &[f64]) -> (Tensor, Tensor) {
    let (rows, cols) = (w_folded.shape()[0], w_folded.shape()[1]);
    let mut wd = w_folded.data().to_vec();
    for r in 0..rows {
        for c in 0..cols {
            wd[r * cols + c] /= g[c];
        }
    }
    let w = Tensor::from_vec(vec![rows, cols], wd).unwrap();
    let mut bd = b_folded.data().to_vec();
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            acc += w.data()[r * cols + c] * h[c];
        }
        bd[r] -= acc;
    }
    (w, Tensor::from_vec(vec![rows], bd).unwrap())
}

/// Rewrites a non-normalized stack into the weight-normalized form
/// computing the identical function.
pub fn vanilla_to_wn(stack: &MlpStack) -> Result<WnStack> {
    if stack.weights.len() != stack.slopes.len() + 1 || stack.weights.len() != stack.biases.len() {
        return Err(Error::InvalidArg(format!(
            "stack shape: {} weights, {} biases, {} slopes do not form an alternating stack",
            stack.weights.len(),
            stack.biases.len(),
            stack.slopes.len()
        )));
    }
    let n = stack.slopes.len();
    let mut g = vec![1.0; stack.weights[0].shape()[1]];
    let mut h = vec![0.0; stack.weights[0].shape()[1]];
    let mut weights = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);

    for k in 0..n {
        let (w_folded, b_folded) = fold_affine(&stack.weights[k], &stack.biases[k], &g, &h);
        let norms = row_norms(&w_folded, "vanilla_to_wn")?;
        let alpha: Vec<f64> = b_folded
            .data()
            .iter()
            .zip(norms.iter())
            .map(|(b, n)| -b / n)
            .collect();
        alphas.push(Tensor::from_vec(vec![alpha.len()], alpha).unwrap());
        g = norms;
        h = b_folded.data().to_vec();
        weights.push(w_folded);
    }

    let (w_final, b_final) = fold_affine(&stack.weights[n], &stack.biases[n], &g, &h);
    let gamma = row_norms(&w_final, "vanilla_to_wn")?;
    Ok(WnStack {
        weights,
        alphas,
        slopes: stack.slopes.clone(),
        final_gamma: Tensor::from_vec(vec![gamma.len()], gamma).unwrap(),
        final_beta: b_final,
        final_weight: w_final,
    })
}

/// Inverse rewrite: recovers the non-normalized stack.
pub fn wn_to_vanilla(stack: &WnStack) -> Result<MlpStack> {
    if stack.weights.len() != stack.alphas.len() || stack.weights.len() != stack.slopes.len() {
        return Err(Error::InvalidArg(format!(
            "stack shape: {} weights, {} alphas, {} slopes do not form a weight-normalized stack",
            stack.weights.len(),
            stack.alphas.len(),
            stack.slopes.len()
        )));
    }
    let n = stack.weights.len();
    let in_dim = if n > 0 {
        stack.weights[0].shape()[1]
    } else {
        stack.final_weight.shape()[1]
    };
    let mut g = vec![1.0; in_dim];
    let mut h = vec![0.0; in_dim];
    let mut weights = Vec::with_capacity(n + 1);
    let mut biases = Vec::with_capacity(n + 1);

    for k in 0..n {
        let v = &stack.weights[k];
        let norms = row_norms(v, "wn_to_vanilla")?;
        let b_folded: Vec<f64> = stack.alphas[k]
            .data()
            .iter()
            .zip(norms.iter())
            .map(|(a, n)| -a * n)
            .collect();
        let b_folded = Tensor::from_vec(vec![b_folded.len()], b_folded).unwrap();
        let (w, b) = unfold_affine(v, &b_folded, &g, &h);
        weights.push(w);
        biases.push(b);
        g = norms;
        h = b_folded.data().to_vec();
    }

    // the affine weight-normalized layer as a plain linear layer
    let rho = row_norms(&stack.final_weight, "wn_to_vanilla")?;
    let (rows, cols) = (
        stack.final_weight.shape()[0],
        stack.final_weight.shape()[1],
    );
    let mut wd = stack.final_weight.data().to_vec();
    for r in 0..rows {
        let scale = stack.final_gamma.data()[r] / rho[r];
        for c in 0..cols {
            wd[r * cols + c] *= scale;
        }
    }
    let w_lin = Tensor::from_vec(vec![rows, cols], wd).unwrap();
    let (w, b) = unfold_affine(&w_lin, &stack.final_beta, &g, &h);
    weights.push(w);
    biases.push(b);

    Ok(MlpStack {
        weights,
        biases,
        slopes: stack.slopes.clone(),
    })
}

fn apply_linear(w: &Tensor, b: Option<&Tensor>, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            acc += w.data()[r * cols + c] * x[c];
        }
        out[r] = acc + b.map_or(0.0, |b| b.data()[r]);
    }
    out
}

fn prelu_vec(x: &mut [f64], slopes: &Tensor) {
    for (v, s) in x.iter_mut().zip(slopes.data().iter()) {
        if *v < 0.0 {
            *v *= s;
        }
    }
}

/// Runs the non-normalized stack on a batch `[batch, in]`.
pub fn run_vanilla(stack: &MlpStack, x: &Tensor) -> Result<Tensor> {
    let batch = x.shape()[0];
    let in_dim = x.shape()[1];
    let out_dim = stack.weights.last().unwrap().shape()[0];
    let mut out = vec![0.0; batch * out_dim];
    for bi in 0..batch {
        let mut cur = x.data()[bi * in_dim..(bi + 1) * in_dim].to_vec();
        for k in 0..stack.slopes.len() {
            cur = apply_linear(&stack.weights[k], Some(&stack.biases[k]), &cur);
            prelu_vec(&mut cur, &stack.slopes[k]);
        }
        let last = stack.weights.len() - 1;
        cur = apply_linear(&stack.weights[last], Some(&stack.biases[last]), &cur);
        out[bi * out_dim..(bi + 1) * out_dim].copy_from_slice(&cur);
    }
    Tensor::from_vec(vec![batch, out_dim], out)
}

fn tprelu_vec(x: &mut [f64], alphas: &Tensor, slopes: &Tensor) {
    for ((v, a), s) in x
        .iter_mut()
        .zip(alphas.data().iter())
        .zip(slopes.data().iter())
    {
        if *v < *a {
            *v = s * (*v - a) + a;
        }
    }
}

/// Runs the weight-normalized stack on a batch `[batch, in]` with exact
/// row norms.
pub fn run_wn(stack: &WnStack, x: &Tensor) -> Result<Tensor> {
    let batch = x.shape()[0];
    let in_dim = x.shape()[1];
    let out_dim = stack.final_weight.shape()[0];
    let mut norm_cache: Vec<Vec<f64>> = Vec::new();
    for w in &stack.weights {
        norm_cache.push(row_norms(w, "run_wn")?);
    }
    let final_norms = row_norms(&stack.final_weight, "run_wn")?;

    let mut out = vec![0.0; batch * out_dim];
    for bi in 0..batch {
        let mut cur = x.data()[bi * in_dim..(bi + 1) * in_dim].to_vec();
        for k in 0..stack.weights.len() {
            cur = apply_linear(&stack.weights[k], None, &cur);
            for (v, n) in cur.iter_mut().zip(norm_cache[k].iter()) {
                *v /= n;
            }
            tprelu_vec(&mut cur, &stack.alphas[k], &stack.slopes[k]);
        }
        cur = apply_linear(&stack.final_weight, None, &cur);
        for (i, v) in cur.iter_mut().enumerate() {
            *v = *v / final_norms[i] * stack.final_gamma.data()[i] + stack.final_beta.data()[i];
        }
        out[bi * out_dim..(bi + 1) * out_dim].copy_from_slice(&cur);
    }
    Tensor::from_vec(vec![batch, out_dim], out)
}

/// Random non-normalized stack with `widths.len() - 1` linear layers.
pub fn random_stack(widths: &[usize], rng: &mut DetRng) -> MlpStack {
    assert!(widths.len() >= 2);
    let n_linear = widths.len() - 1;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut slopes = Vec::new();
    for k in 0..n_linear {
        let (fan_out, fan_in) = (widths[k + 1], widths[k]);
        let mut wd = vec![0.0; fan_out * fan_in];
        rng.fill_normal(&mut wd);
        weights.push(Tensor::from_vec(vec![fan_out, fan_in], wd).unwrap());
        let mut bd = vec![0.0; fan_out];
        rng.fill_normal(&mut bd);
        biases.push(Tensor::from_vec(vec![fan_out], bd).unwrap());
        if k + 1 < n_linear {
            let mut sd = vec![0.0; fan_out];
            rng.fill_uniform(&mut sd, 0.0, 1.0);
            slopes.push(Tensor::from_vec(vec![fan_out], sd).unwrap());
        }
    }
    MlpStack {
        weights,
        biases,
        slopes,
    }
}

/// Maximum output discrepancy between a stack and its rewritten form over
/// random inputs, plus the parameter error of the round trip.
pub struct EquivalenceReport {
    pub max_output_diff: f64,
    pub max_roundtrip_err: f64,
    pub inputs: usize,
}

pub fn check_equivalence(
    stack: &MlpStack,
    inputs: usize,
    rng: &mut DetRng,
) -> Result<EquivalenceReport> {
    let wn = vanilla_to_wn(stack)?;
    let in_dim = stack.weights[0].shape()[1];
    let mut xd = vec![0.0; inputs * in_dim];
    rng.fill_normal(&mut xd);
    let x = Tensor::from_vec(vec![inputs, in_dim], xd)?;
    let a = run_vanilla(stack, &x)?;
    let b = run_wn(&wn, &x)?;
    let max_output_diff = a.max_abs_diff(&b);

    let back = wn_to_vanilla(&wn)?;
    let mut max_roundtrip_err: f64 = 0.0;
    for (w1, w2) in stack.weights.iter().zip(back.weights.iter()) {
        max_roundtrip_err = max_roundtrip_err.max(w1.max_abs_diff(w2));
    }
    for (b1, b2) in stack.biases.iter().zip(back.biases.iter()) {
        max_roundtrip_err = max_roundtrip_err.max(b1.max_abs_diff(b2));
    }
    for (s1, s2) in stack.slopes.iter().zip(back.slopes.iter()) {
        max_roundtrip_err = max_roundtrip_err.max(s1.max_abs_diff(s2));
    }
    Ok(EquivalenceReport {
        max_output_diff,
        max_roundtrip_err,
        inputs,
    })
}
