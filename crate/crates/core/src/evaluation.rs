//! Reconstruction-loss evaluation: for each test sample, gradient descent
//! on the latent code (starting from the zero vector) minimizing the
//! squared Euclidean distance to the sample, normalized per element. The
//! mean over samples measures how well the generator covers the data.
//!
//! Reconstructions are independent across samples, so the whole set is
//! optimized as one batch with a summed objective; per-sample trajectories
//! are identical to sequential runs because samples never interact.

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::netbuild::{ForwardCtx, Network};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::training::rmsprop_step;
use serde::{Deserialize, Serialize};

/// Latent-inversion budget and optimizer settings. The optimizer is
/// RMSProp with the training-loop constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Gradient-descent steps per reconstruction (50 running, 2000 final).
    pub steps: usize,
    pub lr: f64,
    pub rmsprop_alpha: f64,
    pub rmsprop_eps: f64,
    /// Running-evaluation subset size.
    pub n_samples: usize,
    pub seed: u64,
}

impl EvalConfig {
    pub fn running() -> Self {
        EvalConfig {
            steps: 50,
            lr: 0.01,
            rmsprop_alpha: 0.9,
            rmsprop_eps: 1e-6,
            n_samples: 200,
            seed: 0,
        }
    }

    pub fn final_eval() -> Self {
        EvalConfig {
            steps: 2000,
            ..EvalConfig::running()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArg("eval steps must be >= 1".into()));
        }
        if self.lr <= 0.0 || self.rmsprop_alpha <= 0.0 || self.rmsprop_eps <= 0.0 {
            return Err(Error::InvalidArg(
                "eval optimizer constants must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Anything that maps latent codes to samples on a tape. Evaluation always
/// runs generators in inference mode.
pub trait LatentGenerator {
    fn latent_dim(&self) -> usize;
    /// Per-sample output shape.
    fn sample_shape(&self) -> Vec<usize>;
    /// Maps `z: [batch, latent]` to `[batch, ...sample_shape]`.
    fn generate(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId>;
}

impl LatentGenerator for Network {
    fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    fn sample_shape(&self) -> Vec<usize> {
        self.spec.output_shape.clone()
    }

    fn generate(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let staged = self.stage(tape);
        let mut ctx = ForwardCtx::default();
        Ok(staged.forward(tape, z, Mode::Inference, &mut ctx)?.out)
    }
}

/// Per-sample and aggregate reconstruction losses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sample_loss: Vec<f64>,
    pub mean_loss: f64,
    pub steps: usize,
    pub checkpoint: String,
    pub wall_ms: u64,
    /// Samples dropped by the skip-and-flag policy after per-sample errors.
    pub skipped: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("eval report serializes")
    }

    pub fn from_json(s: &str) -> Result<EvalReport> {
        serde_json::from_str(s).map_err(|e| Error::Parse(format!("eval report: {e}")))
    }

    /// Per-sample CSV: `index,loss` with a header row.
    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("index,loss\n");
        for (i, l) in self.per_sample_loss.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

/// Gradient descent on latent codes for a batch of targets
/// `[n, ...sample_shape]`. Returns the optimized codes and the per-sample
/// per-element squared losses at the final codes.
pub fn reconstruct(
    gen: &dyn LatentGenerator,
    targets: &Tensor,
    config: &EvalConfig,
) -> Result<(Tensor, Vec<f64>)> {
    config.validate()?;
    let n = targets.shape()[0];
    let sample_shape = gen.sample_shape();
    if targets.shape()[1..] != sample_shape[..] {
        return Err(Error::ShapeMismatch {
            op: "reconstruct",
            lhs: targets.shape().to_vec(),
            rhs: sample_shape,
        });
    }
    let per_elem: usize = targets.numel() / n;
    let norm = 1.0 / per_elem as f64;

    // starting point: the all-zero code
    let mut z = Tensor::zeros(vec![n, gen.latent_dim()]);
    let mut state = Tensor::zeros(vec![n, gen.latent_dim()]);

    for step in 0..config.steps {
        let (grad, _) = loss_and_grad(gen, &z, targets, norm)
            .map_err(|e| step_error(e, step))?;
        rmsprop_step(
            &mut state,
            &mut z,
            &grad,
            config.lr,
            config.rmsprop_alpha,
            config.rmsprop_eps,
        )?;
    }
    // losses of the final codes
    let (_, losses) = loss_and_grad(gen, &z, targets, norm)
        .map_err(|e| step_error(e, config.steps))?;
    Ok((z, losses))
}

fn step_error(e: Error, step: usize) -> Error {
    Error::NonFinite {
        op: "reconstruct",
        detail: format!("step {step}: {e}"),
    }
}

/// One forward/backward of the summed reconstruction objective; returns
/// the gradient with respect to the codes and the per-sample losses.
fn loss_and_grad(
    gen: &dyn LatentGenerator,
    z: &Tensor,
    targets: &Tensor,
    norm: f64,
) -> Result<(Tensor, Vec<f64>)> {
    let mut tape = Tape::new();
    let zn = tape.leaf(z.clone());
    let out = gen.generate(&mut tape, zn)?;
    let tn = tape.leaf(targets.clone());
    let diff = tape.sub(out, tn)?;
    let sq = tape.mul(diff, diff)?;
    // per-sample sums for reporting; the summed objective for the gradient
    let per_sample = tape.channel_sum(sq, 0)?;
    let total = tape.sum(sq)?;
    let root = tape.mul_scalar(total, norm)?;
    tape.backward(root)?;
    let losses: Vec<f64> = tape.value(per_sample).data().iter().map(|v| v * norm).collect();
    Ok((tape.grad(zn), losses))
}

/// Reconstructs every target; on a batch error falls back to per-sample
/// runs, skipping and counting failures.
fn reconstruct_with_skips(
    gen: &dyn LatentGenerator,
    targets: &Tensor,
    config: &EvalConfig,
) -> (Vec<f64>, usize) {
    match reconstruct(gen, targets, config) {
        Ok((_, losses)) => (losses, 0),
        Err(_) => {
            let n = targets.shape()[0];
            let per: usize = targets.numel() / n;
            let mut losses = Vec::new();
            let mut skipped = 0;
            for i in 0..n {
                let mut shape = vec![1usize];
                shape.extend_from_slice(&targets.shape()[1..]);
                let one =
                    Tensor::from_vec(shape, targets.data()[i * per..(i + 1) * per].to_vec())
                        .expect("slice shape");
                match reconstruct(gen, &one, config) {
                    Ok((_, l)) => losses.push(l[0]),
                    Err(_) => skipped += 1,
                }
            }
            (losses, skipped)
        }
    }
}

fn finish_report(
    losses: Vec<f64>,
    skipped: usize,
    steps: usize,
    checkpoint: &str,
    started: std::time::Instant,
) -> Result<EvalReport> {
    if losses.is_empty() {
        return Err(Error::InvalidArg(
            "evaluation produced no successful reconstructions".into(),
        ));
    }
    let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(EvalReport {
        per_sample_loss: losses,
        mean_loss,
        steps,
        checkpoint: checkpoint.to_string(),
        wall_ms: started.elapsed().as_millis() as u64,
        skipped,
    })
}

/// Low-budget evaluation on a fixed subset, used during training to pick
/// the best checkpoint.
pub fn running_eval(
    gen: &dyn LatentGenerator,
    subset: &Tensor,
    config: &EvalConfig,
    checkpoint: &str,
) -> Result<EvalReport> {
    let started = std::time::Instant::now();
    let (losses, skipped) = reconstruct_with_skips(gen, subset, config);
    finish_report(losses, skipped, config.steps, checkpoint, started)
}

/// Full-budget evaluation on the complete held-out set.
pub fn final_eval(
    gen: &dyn LatentGenerator,
    test_set: &Tensor,
    config: &EvalConfig,
    checkpoint: &str,
) -> Result<EvalReport> {
    if test_set.shape()[0] == 0 {
        return Err(Error::InvalidArg("final_eval: empty test set".into()));
    }
    let started = std::time::Instant::now();
    let (losses, skipped) = reconstruct_with_skips(gen, test_set, config);
    finish_report(losses, skipped, config.steps, checkpoint, started)
}
