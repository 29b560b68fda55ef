//! GAN training: alternating discriminator/generator updates with the
//! non-saturating logistic loss, RMSProp, separate real/fake batches for
//! the discriminator, and post-step slope clipping to `[0,1]`.
//!
//! Losses are computed on pre-sigmoid logits through a stable softplus:
//! `-log D = softplus(-logit)` and `-log(1 - D) = softplus(logit)`, exact
//! identities for a sigmoid discriminator head.

use crate::checkpoint;
use crate::data::{Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalConfig};
use crate::layers::Mode;
use crate::netbuild::{ForwardCtx, Network, NetworkSpec};
use crate::ppm;
use crate::rng::DetRng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Sub-stream tags carved out of the config seed.
const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL_SUBSET: u64 = 2;
const STREAM_SAMPLE_GRID: u64 = 3;

/// Number of fixed latent codes reused for every sample grid.
const SAMPLE_GRID_CODES: usize = 16;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub rmsprop_alpha: f64,
    pub rmsprop_eps: f64,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub total_iters: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            rmsprop_alpha: 0.9,
            rmsprop_eps: 1e-6,
            batch_size: 32,
            latent_dim: 256,
            total_iters: 2000,
            eval_every: 500,
            seed: 1,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0
            || self.rmsprop_alpha <= 0.0
            || self.rmsprop_eps <= 0.0
            || self.batch_size == 0
            || self.latent_dim == 0
            || self.total_iters == 0
            || self.eval_every == 0
        {
            return Err(Error::InvalidArg(
                "train config fields must be positive".into(),
            ));
        }
        if self.eval_every > self.total_iters {
            return Err(Error::InvalidArg(format!(
                "eval_every {} exceeds total_iters {}",
                self.eval_every, self.total_iters
            )));
        }
        Ok(())
    }
}

/// One RMSProp update: `s <- alpha s + (1 - alpha) g^2`, then
/// `p <- p - lr g / (sqrt(s) + eps)`. Rejects non-finite gradients before
/// touching the parameter or the state.
pub fn rmsprop_step(
    state: &mut Tensor,
    param: &mut Tensor,
    grad: &Tensor,
    lr: f64,
    alpha: f64,
    eps: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.shape() {
        return Err(Error::ShapeMismatch {
            op: "rmsprop_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    if let Some(i) = grad.first_non_finite() {
        return Err(Error::NonFinite {
            op: "rmsprop_step",
            detail: format!("gradient element {i}; step aborted"),
        });
    }
    for ((s, p), &g) in state
        .data_mut()
        .iter_mut()
        .zip(param.data_mut().iter_mut())
        .zip(grad.data().iter())
    {
        *s = alpha * *s + (1.0 - alpha) * g * g;
        *p -= lr * g / (s.sqrt() + eps);
    }
    Ok(())
}

/// Per-parameter squared-gradient running averages keyed by path.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub alpha: f64,
    pub eps: f64,
    pub state: BTreeMap<String, Tensor>,
}

impl RmsProp {
    pub fn new(alpha: f64, eps: f64) -> Self {
        RmsProp {
            alpha,
            eps,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        let s = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        rmsprop_step(s, param, grad, lr, self.alpha, self.eps)
    }
}

/// Everything a training run carries between iterations; checkpoints
/// serialize this whole state so a resumed run is bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub disc: Network,
    pub gen: Network,
    pub opt_d: RmsProp,
    pub opt_g: RmsProp,
    /// Batch-index and noise stream.
    pub rng: DetRng,
    pub iter: u64,
    pub best_running_loss: f64,
    pub best_iter: u64,
    pub config: TrainConfig,
}

impl TrainState {
    /// Initializes both networks (deterministically from the config seed)
    /// and fresh optimizer state.
    pub fn init(disc_spec: &NetworkSpec, gen_spec: &NetworkSpec, config: TrainConfig) -> Result<TrainState> {
        config.validate()?;
        let root = DetRng::new(config.seed);
        let mut init_rng = root.substream(STREAM_INIT);
        let disc = Network::init(disc_spec, &mut init_rng);
        let gen = Network::init(gen_spec, &mut init_rng);
        Ok(TrainState {
            disc,
            gen,
            opt_d: RmsProp::new(config.rmsprop_alpha, config.rmsprop_eps),
            opt_g: RmsProp::new(config.rmsprop_alpha, config.rmsprop_eps),
            rng: root.substream(STREAM_TRAIN),
            iter: 0,
            best_running_loss: f64::INFINITY,
            best_iter: 0,
            config,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub loss_d: f64,
    pub loss_g: f64,
    /// Discriminator forward passes during the discriminator update; the
    /// real and generated batches always go through separately.
    pub disc_forwards: u32,
}

fn sample_latent(rng: &mut DetRng, n: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; n * dim];
    rng.fill_normal(&mut data);
    Tensor::from_vec(vec![n, dim], data).unwrap()
}

/// Applies collected gradients through the optimizer; any non-finite
/// gradient aborts before the first parameter is touched.
fn apply_updates(
    net: &mut Network,
    opt: &mut RmsProp,
    grads: &[(String, Tensor)],
    lr: f64,
) -> Result<()> {
    for (path, g) in grads {
        if let Some(i) = g.first_non_finite() {
            return Err(Error::NonFinite {
                op: "apply_updates",
                detail: format!("gradient for {path} element {i}; step aborted"),
            });
        }
    }
    let mut i = 0;
    let mut status = Ok(());
    net.visit_params_mut(&mut |path, _, t| {
        if status.is_err() {
            return;
        }
        let (gpath, g) = &grads[i];
        debug_assert_eq!(path, gpath);
        status = opt.step(path, t, g, lr);
        i += 1;
    });
    status
}

/// One discriminator update followed by one generator update.
pub fn train_step(state: &mut TrainState, real: &Tensor) -> Result<StepMetrics> {
    let batch = real.shape()[0];
    if batch != state.config.batch_size {
        return Err(Error::InvalidArg(format!(
            "real batch size {batch} does not match configured {}",
            state.config.batch_size
        )));
    }
    let lr = state.config.lr;
    let latent = state.config.latent_dim;

    // ── discriminator update ────────────────────────────────────────────
    // generated batch is produced on its own tape and enters the
    // discriminator tape as a constant (no generator update here)
    let z1 = sample_latent(&mut state.rng, batch, latent);
    let (fake_batch, gen_stats) = {
        let mut tape = Tape::new();
        let zn = tape.leaf(z1);
        let staged = state.gen.stage(&mut tape);
        let mut ctx = ForwardCtx::default();
        let out = staged.forward(&mut tape, zn, Mode::Train, &mut ctx)?;
        (tape.value(out.out).clone(), ctx.bn_stats)
    };
    state.gen.apply_bn_updates(&gen_stats);

    let (loss_d, grads_d, stats_real, stats_fake, disc_forwards) = {
        let mut tape = Tape::new();
        let staged = state.disc.stage(&mut tape);
        let real_n = tape.leaf(real.clone());
        let fake_n = tape.leaf(fake_batch);

        // separate batches: true and generated samples never share one
        // normalization batch
        let mut ctx_real = ForwardCtx::default();
        let out_real = staged.forward(&mut tape, real_n, Mode::Train, &mut ctx_real)?;
        let mut ctx_fake = ForwardCtx::default();
        let out_fake = staged.forward(&mut tape, fake_n, Mode::Train, &mut ctx_fake)?;

        let neg_real = tape.neg(out_real.logits)?;
        let sp_real = tape.softplus(neg_real)?;
        let term_real = tape.mean(sp_real)?;
        let sp_fake = tape.softplus(out_fake.logits)?;
        let term_fake = tape.mean(sp_fake)?;
        let loss = tape.add(term_real, term_fake)?;
        tape.backward(loss)?;

        let grads: Vec<(String, Tensor)> = staged
            .params
            .iter()
            .map(|p| (p.path.clone(), tape.grad(p.id)))
            .collect();
        (
            tape.value(loss).item(),
            grads,
            ctx_real.bn_stats,
            ctx_fake.bn_stats,
            ctx_real.forward_calls + ctx_fake.forward_calls,
        )
    };
    apply_updates(&mut state.disc, &mut state.opt_d, &grads_d, lr)?;
    state.disc.clip_slopes();
    state.disc.apply_bn_updates(&stats_real);
    state.disc.apply_bn_updates(&stats_fake);

    // ── generator update ────────────────────────────────────────────────
    let z2 = sample_latent(&mut state.rng, batch, latent);
    let (loss_g, grads_g, gen_stats2, disc_stats3) = {
        let mut tape = Tape::new();
        let staged_g = state.gen.stage(&mut tape);
        let staged_d = state.disc.stage(&mut tape);
        let zn = tape.leaf(z2);
        let mut ctx_g = ForwardCtx::default();
        let fake = staged_g.forward(&mut tape, zn, Mode::Train, &mut ctx_g)?;
        let mut ctx_d = ForwardCtx::default();
        let verdict = staged_d.forward(&mut tape, fake.out, Mode::Train, &mut ctx_d)?;

        // non-saturating loss: maximize log D(G(z))
        let neg = tape.neg(verdict.logits)?;
        let sp = tape.softplus(neg)?;
        let loss = tape.mean(sp)?;
        tape.backward(loss)?;

        let grads: Vec<(String, Tensor)> = staged_g
            .params
            .iter()
            .map(|p| (p.path.clone(), tape.grad(p.id)))
            .collect();
        (
            tape.value(loss).item(),
            grads,
            ctx_g.bn_stats,
            ctx_d.bn_stats,
        )
    };
    apply_updates(&mut state.gen, &mut state.opt_g, &grads_g, lr)?;
    state.gen.clip_slopes();
    state.gen.apply_bn_updates(&gen_stats2);
    state.disc.apply_bn_updates(&disc_stats3);

    Ok(StepMetrics {
        loss_d,
        loss_g,
        disc_forwards,
    })
}

// ── metric log ──────────────────────────────────────────────────────────

pub const METRICS_HEADER: &str = "iter,loss_d,loss_g,running_rec_loss,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub running_rec_loss: Option<f64>,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let running = self
            .running_rec_loss
            .map(|v| v.to_string())
            .unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.iter, self.loss_d, self.loss_g, running, self.wall_ms
        )
    }
}

/// Parses a metrics CSV produced by [`train_loop`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != METRICS_HEADER {
                return Err(Error::Parse(format!(
                    "metrics header mismatch: got '{line}'"
                )));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Parse(format!("metrics line {i}: '{line}'")));
        }
        let parse_f = |s: &str, what: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Parse(format!("metrics line {i}: bad {what} '{s}'")))
        };
        rows.push(MetricsRow {
            iter: parts[0]
                .parse()
                .map_err(|_| Error::Parse(format!("metrics line {i}: bad iter")))?,
            loss_d: parse_f(parts[1], "loss_d")?,
            loss_g: parse_f(parts[2], "loss_g")?,
            running_rec_loss: if parts[3].is_empty() {
                None
            } else {
                Some(parse_f(parts[3], "running_rec_loss")?)
            },
            wall_ms: parts[4]
                .parse()
                .map_err(|_| Error::Parse(format!("metrics line {i}: bad wall_ms")))?,
        });
    }
    Ok(rows)
}

// ── training loop ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_iter: u64,
    pub best_running_loss: f64,
    pub evals: Vec<(u64, f64)>,
    pub metrics_path: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

/// Fixed evaluation subset: drawn once per run from the test indices with
/// a dedicated seed sub-stream, so resumed runs see the same subset.
pub fn eval_subset_indices(split: &DatasetSplit, seed: u64, n: usize) -> Vec<usize> {
    let mut rng = DetRng::new(seed).substream(STREAM_EVAL_SUBSET);
    let mut indices = split.test.clone();
    rng.shuffle(&mut indices);
    indices.truncate(n.min(indices.len()));
    indices
}

/// Fixed latent codes reused for every sample grid of a run.
pub fn sample_grid_codes(seed: u64, latent_dim: usize) -> Tensor {
    let mut rng = DetRng::new(seed).substream(STREAM_SAMPLE_GRID);
    sample_latent(&mut rng, SAMPLE_GRID_CODES, latent_dim)
}

/// Writes a fixed-code sample grid next to the metrics log. Image
/// generators produce a tiled grid; two-dimensional generators produce a
/// scatter plot.
fn write_sample_grid(gen: &Network, codes: &Tensor, path: &Path) -> Result<()> {
    let mut tape = Tape::new();
    let zn = tape.leaf(codes.clone());
    let staged = gen.stage(&mut tape);
    let mut ctx = ForwardCtx::default();
    let out = staged.forward(&mut tape, zn, Mode::Inference, &mut ctx)?;
    let samples = tape.value(out.out);
    let image = if samples.ndim() == 4 {
        ppm::tile_grid(samples)?
    } else {
        ppm::scatter_plot(samples, 128)?
    };
    ppm::write_ppm(path, &image)
}

/// Runs the training protocol: `total_iters` alternating updates, a
/// running evaluation every `eval_every` iterations on a fixed test
/// subset, best-checkpoint tracking, periodic checkpoints, and an
/// append-only metrics log.
pub fn train_loop(
    state: &mut TrainState,
    dataset: &Dataset,
    split: &DatasetSplit,
    eval_cfg: &EvalConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    state.config.validate()?;
    eval_cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Dataset("empty training split".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let metrics_path = out_dir.join("metrics.csv");
    let write_header = !metrics_path.exists()
        || std::fs::metadata(&metrics_path)
            .map(|m| m.len() == 0)
            .unwrap_or(true);
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| io_err(&metrics_path, e))?;
    if write_header {
        writeln!(metrics, "{METRICS_HEADER}").map_err(|e| io_err(&metrics_path, e))?;
    }

    let subset_idx = eval_subset_indices(split, state.config.seed, eval_cfg.n_samples);
    let subset = dataset.gather(&subset_idx)?;
    let grid_codes = sample_grid_codes(state.config.seed, state.config.latent_dim);

    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let mut best_checkpoint = state.best_running_loss.is_finite().then(|| best_path.clone());
    let mut last_good: Option<PathBuf> = None;
    let mut evals = Vec::new();
    let total = state.config.total_iters;
    let abort = |iter: u64, detail: String, last: &Option<PathBuf>| Error::TrainAborted {
        iter,
        detail,
        last_checkpoint: last.as_ref().map(|p| p.display().to_string()),
    };

    while state.iter < total {
        let iter = state.iter + 1;
        let started = std::time::Instant::now();

        let batch_idx: Vec<usize> = (0..state.config.batch_size)
            .map(|_| split.train[state.rng.below(split.train.len())])
            .collect();
        let real = dataset.gather(&batch_idx)?;

        let step = train_step(state, &real)
            .map_err(|e| abort(iter, e.to_string(), &last_good))?;
        state.iter = iter;

        let mut running = None;
        if iter.is_multiple_of(state.config.eval_every) {
            let report =
                evaluation::running_eval(&state.gen, &subset, eval_cfg, &format!("iter_{iter}"))
                    .map_err(|e| abort(iter, e.to_string(), &last_good))?;
            running = Some(report.mean_loss);
            evals.push((iter, report.mean_loss));
            if report.mean_loss < state.best_running_loss {
                state.best_running_loss = report.mean_loss;
                state.best_iter = iter;
                checkpoint::save(&best_path, state)
                    .map_err(|e| abort(iter, e.to_string(), &last_good))?;
                best_checkpoint = Some(best_path.clone());
            }
            let grid_path = out_dir.join(format!("samples_{iter}.ppm"));
            write_sample_grid(&state.gen, &grid_codes, &grid_path)
                .map_err(|e| abort(iter, e.to_string(), &last_good))?;
        }

        if state.config.checkpoint_every > 0 && iter.is_multiple_of(state.config.checkpoint_every) {
            let path = out_dir.join(format!("ckpt_{iter}.ckpt"));
            checkpoint::save(&path, state)
                .map_err(|e| abort(iter, e.to_string(), &last_good))?;
            last_good = Some(path);
        }

        let row = MetricsRow {
            iter,
            loss_d: step.loss_d,
            loss_g: step.loss_g,
            running_rec_loss: running,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        writeln!(metrics, "{}", row.to_csv_line())
            .map_err(|e| abort(iter, io_err(&metrics_path, e).to_string(), &last_good))?;
    }

    checkpoint::save(&last_path, state)?;
    Ok(TrainOutcome {
        best_iter: state.best_iter,
        best_running_loss: state.best_running_loss,
        evals,
        metrics_path,
        last_checkpoint: last_path,
        best_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netbuild::{build_mlp_gan, Variant};

    #[test]
    fn rmsprop_zero_gradient_leaves_params_unchanged() {
        let mut s = Tensor::zeros(vec![3]);
        let mut p = Tensor::from_vec(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let g = Tensor::zeros(vec![3]);
        rmsprop_step(&mut s, &mut p, &g, 0.1, 0.9, 1e-6).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn rmsprop_first_step_hand_computed() {
        // g = 1, s0 = 0, alpha = 0.9, lr = 0.1, eps = 0:
        // s = 0.1, delta = -0.1/sqrt(0.1) = -sqrt(0.1)
        let mut s = Tensor::zeros(vec![1]);
        let mut p = Tensor::zeros(vec![1]);
        let g = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        rmsprop_step(&mut s, &mut p, &g, 0.1, 0.9, 0.0).unwrap();
        let expect = -(0.1f64).sqrt();
        assert!((p.data()[0] - expect).abs() < 1e-15, "{}", p.data()[0]);
    }

    #[test]
    fn rmsprop_rejects_non_finite_gradient_before_mutating() {
        let mut s = Tensor::zeros(vec![2]);
        let mut p = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let g = Tensor::from_vec(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(rmsprop_step(&mut s, &mut p, &g, 0.1, 0.9, 1e-6).is_err());
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(s.data(), &[0.0, 0.0]);
    }

    fn two_point_batch(n: usize) -> Tensor {
        let data: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        Tensor::from_vec(vec![n, 1], data).unwrap()
    }

    #[test]
    fn vanilla_two_point_smoke_loss_decreases() {
        let (d, g) = build_mlp_gan(Variant::Vanilla, 1, 8, 2, false).unwrap();
        let config = TrainConfig {
            batch_size: 16,
            latent_dim: 2,
            total_iters: 50,
            eval_every: 50,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let mut state = TrainState::init(&d, &g, config).unwrap();
        let real = two_point_batch(16);
        let first = train_step(&mut state, &real).unwrap();
        // untrained discriminator sits near D = 0.5, so the loss starts in
        // the neighbourhood of 2 ln 2 (random init shifts it slightly)
        let two_ln2 = 2.0 * std::f64::consts::LN_2;
        assert!(
            (first.loss_d - two_ln2).abs() < 0.35,
            "initial loss {} vs {}",
            first.loss_d,
            two_ln2
        );
        let mut last = first;
        for _ in 1..50 {
            last = train_step(&mut state, &real).unwrap();
        }
        assert!(
            last.loss_d < first.loss_d,
            "loss did not decrease: {} -> {}",
            first.loss_d,
            last.loss_d
        );
        assert!(last.loss_d.is_finite() && last.loss_g.is_finite());
    }

    #[test]
    fn slopes_stay_clipped_after_every_step() {
        let (d, g) = build_mlp_gan(Variant::Wn, 1, 6, 2, false).unwrap();
        let config = TrainConfig {
            batch_size: 8,
            latent_dim: 2,
            total_iters: 20,
            eval_every: 20,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let mut state = TrainState::init(&d, &g, config).unwrap();
        let real = two_point_batch(8);
        for _ in 0..20 {
            train_step(&mut state, &real).unwrap();
            for net in [&state.disc, &state.gen] {
                net.visit_params(&mut |path, kind, t| {
                    if kind == crate::netbuild::ParamKind::Slope {
                        for v in t.data() {
                            assert!((0.0..=1.0).contains(v), "{path}: slope {v}");
                        }
                    }
                });
            }
        }
    }

    #[test]
    fn separate_batches_for_discriminator_update() {
        for variant in [Variant::Vanilla, Variant::Bn, Variant::Wn] {
            let (d, g) = build_mlp_gan(variant, 1, 4, 2, false).unwrap();
            let config = TrainConfig {
                batch_size: 8,
                latent_dim: 2,
                total_iters: 1,
                eval_every: 1,
                ..TrainConfig::default()
            };
            let mut state = TrainState::init(&d, &g, config).unwrap();
            let real = two_point_batch(8);
            let m = train_step(&mut state, &real).unwrap();
            assert_eq!(m.disc_forwards, 2);
        }
    }

    #[test]
    fn identical_seeds_give_bitwise_identical_params() {
        let (d, g) = build_mlp_gan(Variant::Wn, 1, 6, 2, false).unwrap();
        let config = TrainConfig {
            batch_size: 8,
            latent_dim: 2,
            total_iters: 100,
            eval_every: 100,
            seed: 77,
            ..TrainConfig::default()
        };
        let mut s1 = TrainState::init(&d, &g, config.clone()).unwrap();
        let mut s2 = TrainState::init(&d, &g, config).unwrap();
        let real = two_point_batch(8);
        for _ in 0..100 {
            train_step(&mut s1, &real).unwrap();
            train_step(&mut s2, &real).unwrap();
        }
        assert_eq!(s1.disc, s2.disc);
        assert_eq!(s1.gen, s2.gen);
        assert_eq!(s1.opt_d, s2.opt_d);
        assert_eq!(s1.rng, s2.rng);
    }

    #[test]
    fn eval_cadence_and_best_tracking() {
        let dataset = crate::data::gauss2d_mixture(64, 3);
        let split = crate::data::split(64, 8, 6).unwrap();
        let (d, g) = build_mlp_gan(Variant::Vanilla, 2, 4, 2, true).unwrap();
        let config = TrainConfig {
            batch_size: 4,
            latent_dim: 2,
            total_iters: 40,
            eval_every: 20,
            checkpoint_every: 0,
            seed: 6,
            ..TrainConfig::default()
        };
        let eval_cfg = crate::evaluation::EvalConfig {
            steps: 3,
            n_samples: 4,
            ..crate::evaluation::EvalConfig::running()
        };
        let out = std::env::temp_dir().join(format!("wngan_cadence_{}", std::process::id()));
        std::fs::remove_dir_all(&out).ok();
        let mut state = TrainState::init(&d, &g, config).unwrap();
        let outcome = train_loop(&mut state, &dataset, &split, &eval_cfg, &out).unwrap();
        // 40 iterations at eval_every 20: exactly two evaluation records
        assert_eq!(outcome.evals.len(), 2);
        let rows = read_metrics(&out.join("metrics.csv")).unwrap();
        let logged: Vec<f64> = rows.iter().filter_map(|r| r.running_rec_loss).collect();
        assert_eq!(logged.len(), 2);
        // the best checkpoint's recorded loss is the minimum of the log
        let min = logged.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(outcome.best_running_loss, min);
        let best = crate::checkpoint::load(&out.join("best.ckpt")).unwrap();
        assert_eq!(best.best_running_loss, min);
        assert!(outcome.evals.iter().any(|(i, l)| *i == best.best_iter && *l == min));
        std::fs::remove_dir_all(&out).ok();
    }

    #[test]
    fn resumed_loop_appends_to_metrics_without_second_header() {
        let dataset = crate::data::gauss2d_mixture(64, 2);
        let split = crate::data::split(64, 8, 5).unwrap();
        let (d, g) = build_mlp_gan(Variant::Vanilla, 2, 4, 2, true).unwrap();
        let config = TrainConfig {
            batch_size: 4,
            latent_dim: 2,
            total_iters: 10,
            eval_every: 5,
            checkpoint_every: 0,
            seed: 5,
            ..TrainConfig::default()
        };
        let eval_cfg = crate::evaluation::EvalConfig {
            steps: 2,
            n_samples: 4,
            ..crate::evaluation::EvalConfig::running()
        };
        let out = std::env::temp_dir().join(format!("wngan_append_{}", std::process::id()));
        std::fs::remove_dir_all(&out).ok();
        let mut state = TrainState::init(&d, &g, config).unwrap();
        train_loop(&mut state, &dataset, &split, &eval_cfg, &out).unwrap();
        let mut resumed = crate::checkpoint::load(&out.join("last.ckpt")).unwrap();
        resumed.config.total_iters = 20;
        train_loop(&mut resumed, &dataset, &split, &eval_cfg, &out).unwrap();
        let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert_eq!(
            text.matches(METRICS_HEADER).count(),
            1,
            "header written more than once"
        );
        let rows = read_metrics(&out.join("metrics.csv")).unwrap();
        assert_eq!(rows.len(), 20);
        assert_eq!(rows.last().unwrap().iter, 20);
        std::fs::remove_dir_all(&out).ok();
    }

    #[test]
    fn metrics_roundtrip_through_csv() {
        let dir = std::env::temp_dir().join(format!("wngan_metrics_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("metrics.csv");
        let rows = [
            MetricsRow {
                iter: 1,
                loss_d: 1.5,
                loss_g: 0.25,
                running_rec_loss: None,
                wall_ms: 3,
            },
            MetricsRow {
                iter: 2,
                loss_d: 1.25,
                loss_g: 0.5,
                running_rec_loss: Some(0.125),
                wall_ms: 4,
            },
        ];
        let mut text = String::from(METRICS_HEADER);
        text.push('\n');
        for r in &rows {
            text.push_str(&r.to_csv_line());
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], rows[0]);
        assert_eq!(back[1], rows[1]);
        std::fs::remove_dir_all(&dir).ok();
    }
}
