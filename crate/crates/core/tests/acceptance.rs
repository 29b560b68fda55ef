//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measurements. Run with `cargo test --test acceptance` (add
//! `-- --nocapture` to see the measurement lines).

use std::time::Instant;

use wngan_core::checkpoint;
use wngan_core::data::{self, Dataset, DatasetSplit};
use wngan_core::equivalence;
use wngan_core::evaluation::{self, EvalConfig, LatentGenerator};
use wngan_core::gradcheck;
use wngan_core::layers;
use wngan_core::lipschitz::{self, BoundLayer};
use wngan_core::netbuild::{build_dcgan, build_mlp_gan, build_resnet_gan, Network, Variant};
use wngan_core::rng::DetRng;
use wngan_core::tape::{NodeId, Tape};
use wngan_core::tensor::Tensor;
use wngan_core::training::{self, TrainConfig, TrainState};

fn tmp_dir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("wngan_accept_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn criterion_1_gradient_suite() {
    let started = Instant::now();
    let reports = gradcheck::gradient_suite(100, 20240, None).unwrap();
    let elapsed = started.elapsed();
    let mut worst: f64 = 0.0;
    for r in &reports {
        assert!(r.pass, "criterion 1: FAIL {} ({:?})", r.name, r.failure);
        assert!(
            r.max_rel_err < 1e-4,
            "criterion 1: FAIL {} rel err {}",
            r.name,
            r.max_rel_err
        );
        worst = worst.max(r.max_rel_err);
    }
    assert!(
        elapsed.as_secs() < 60,
        "criterion 1: FAIL runtime {elapsed:?} over 60 s"
    );
    println!(
        "criterion 1: PASS gradient suite, {} layers x 100 points, max rel err {worst:.3e}, {:.1} s",
        reports.len(),
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_2_equivalence_transform() {
    let started = Instant::now();
    let mut rng = DetRng::new(777);
    let mut max_out: f64 = 0.0;
    let mut max_round: f64 = 0.0;
    for n in 1..=3usize {
        // depth 2n+1 alternating stack: n+1 linear layers
        for _ in 0..3 {
            let mut widths = Vec::with_capacity(n + 2);
            for _ in 0..n + 2 {
                widths.push(2 + rng.below(15)); // widths <= 16
            }
            let stack = equivalence::random_stack(&widths, &mut rng);
            let report = equivalence::check_equivalence(&stack, 1000, &mut rng).unwrap();
            assert!(
                report.max_output_diff < 1e-9,
                "criterion 2: FAIL depth {} output diff {}",
                2 * n + 1,
                report.max_output_diff
            );
            assert!(
                report.max_roundtrip_err < 1e-12,
                "criterion 2: FAIL depth {} roundtrip {}",
                2 * n + 1,
                report.max_roundtrip_err
            );
            max_out = max_out.max(report.max_output_diff);
            max_round = max_round.max(report.max_roundtrip_err);
        }
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 30,
        "criterion 2: FAIL runtime {elapsed:?} over 30 s"
    );
    println!(
        "criterion 2: PASS equivalence, max output diff {max_out:.3e}, max roundtrip {max_round:.3e}, {:.1} s",
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_3_gradient_bounds_and_critic() {
    let started = Instant::now();
    let linear = lipschitz::check_gradient_bound(
        BoundLayer::StrictLinear {
            out_dim: 4,
            in_dim: 9,
        },
        1000,
        31,
    )
    .unwrap();
    assert!(
        linear.violations == 0 && linear.max_ratio <= linear.factor + 1e-9,
        "criterion 3: FAIL linear bound {linear:?}"
    );
    let conv = lipschitz::check_gradient_bound(
        BoundLayer::StrictConv {
            c_in: 2,
            c_out: 3,
            kernel: 4,
            stride: 2,
        },
        1000,
        32,
    )
    .unwrap();
    assert!(conv.violations == 0, "criterion 3: FAIL conv bound {conv:?}");
    let tprelu =
        lipschitz::check_gradient_bound(BoundLayer::TPRelu { channels: 6 }, 1000, 33).unwrap();
    assert!(
        tprelu.violations == 0 && tprelu.max_ratio <= 1.0 + 1e-9,
        "criterion 3: FAIL tprelu bound {tprelu:?}"
    );

    let (disc, _) = build_dcgan(Variant::Wn, 8, 4, 8, 2).unwrap();
    let critic_spec = lipschitz::make_critic(&disc).unwrap();
    let budget = lipschitz::budget_for_spec(&critic_spec).unwrap();
    let critic = Network::init(&critic_spec, &mut DetRng::new(3));
    let probe = lipschitz::empirical_lipschitz(&critic, budget.k, 10_000, 34).unwrap();
    assert!(
        probe.pass,
        "criterion 3: FAIL critic probe ratio {} over budget {}",
        probe.max_ratio, probe.k
    );

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 60,
        "criterion 3: FAIL runtime {elapsed:?} over 60 s"
    );
    println!(
        "criterion 3: PASS bounds (linear {:.4}<=({:.4}), conv {:.4}<=({:.4}), tprelu {:.4}<=1) \
         and critic probe {:.3} <= K {:.3}, {:.1} s",
        linear.max_ratio,
        linear.factor,
        conv.max_ratio,
        conv.factor,
        tprelu.max_ratio,
        probe.max_ratio,
        probe.k,
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_4_normalization_statistics() {
    let n = 100_000usize;
    let (out_dim, in_dim) = (4usize, 16usize);
    let mut rng = DetRng::new(404);

    // strict weight-normalized linear on standard-normal input
    let mut wd = vec![0.0; out_dim * in_dim];
    rng.fill_normal(&mut wd);
    let mut xd = vec![0.0; n * in_dim];
    rng.fill_normal(&mut xd);
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::from_vec(vec![out_dim, in_dim], wd).unwrap());
    let x = tape.leaf(Tensor::from_vec(vec![n, in_dim], xd).unwrap());
    let y = layers::strict_wn_linear(&mut tape, w, x, layers::WN_EPS).unwrap();
    for o in 0..out_dim {
        let col: Vec<f64> = (0..n).map(|i| tape.value(y).data()[i * out_dim + o]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(
            mean.abs() < 0.02,
            "criterion 4: FAIL strict WN output {o} mean {mean}"
        );
        assert!(
            (0.95..=1.05).contains(&var),
            "criterion 4: FAIL strict WN output {o} variance {var}"
        );
    }

    // weight-normalized addition preserves unit variance
    let channels = 3usize;
    let mut x1d = vec![0.0; n * channels];
    let mut x2d = vec![0.0; n * channels];
    rng.fill_normal(&mut x1d);
    rng.fill_normal(&mut x2d);
    let mut w1d = vec![0.0; channels];
    let mut w2d = vec![0.0; channels];
    rng.fill_normal(&mut w1d);
    rng.fill_normal(&mut w2d);
    let mut t2 = Tape::new();
    let x1 = t2.leaf(Tensor::from_vec(vec![n, channels], x1d).unwrap());
    let x2 = t2.leaf(Tensor::from_vec(vec![n, channels], x2d).unwrap());
    let w1 = t2.leaf(Tensor::from_vec(vec![channels], w1d).unwrap());
    let w2 = t2.leaf(Tensor::from_vec(vec![channels], w2d).unwrap());
    let sum = layers::wn_add(&mut t2, w1, w2, x1, x2, 1, layers::WN_EPS).unwrap();
    for c in 0..channels {
        let col: Vec<f64> = (0..n).map(|i| t2.value(sum).data()[i * channels + c]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(
            (var - 1.0).abs() <= 0.1,
            "criterion 4: FAIL wn_add channel {c} variance {var}"
        );
    }

    // batch normalization: exact (beta, gamma) output statistics, the
    // standard deviation read through the module's eps convention
    let (batch, ch) = (256usize, 3usize);
    let gammas = [1.0, 3.0, 0.5];
    let betas = [0.0, 7.0, -2.0];
    let mut bxd = vec![0.0; batch * ch];
    for v in bxd.iter_mut() {
        *v = rng.normal_scaled(5.0, 2.0);
    }
    let bx = Tensor::from_vec(vec![batch, ch], bxd).unwrap();
    let mut t3 = Tape::new();
    let g = t3.leaf(Tensor::from_vec(vec![ch], gammas.to_vec()).unwrap());
    let b = t3.leaf(Tensor::from_vec(vec![ch], betas.to_vec()).unwrap());
    let xb = t3.leaf(bx.clone());
    let (yb, _) = layers::batchnorm_train(&mut t3, g, b, xb, layers::BN_EPS, false).unwrap();
    for c in 0..ch {
        let col_in: Vec<f64> = (0..batch).map(|i| bx.data()[i * ch + c]).collect();
        let col_out: Vec<f64> = (0..batch).map(|i| t3.value(yb).data()[i * ch + c]).collect();
        let mean_out = col_out.iter().sum::<f64>() / batch as f64;
        assert!(
            (mean_out - betas[c]).abs() < 1e-6,
            "criterion 4: FAIL bn channel {c} mean {mean_out} vs beta {}",
            betas[c]
        );
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
        };
        let v_in = var(&col_in);
        let v_out = var(&col_out);
        // sigma computed with the module's eps: undo the eps-deflation
        // sigma(y) * sqrt((V + eps) / V) == gamma exactly
        let sigma_module = v_out.sqrt() * ((v_in + layers::BN_EPS) / v_in).sqrt();
        assert!(
            (sigma_module - gammas[c]).abs() < 1e-6,
            "criterion 4: FAIL bn channel {c} module-eps std {sigma_module} vs gamma {}",
            gammas[c]
        );
        // and the raw standard deviation is gamma up to O(eps)
        assert!(
            (v_out.sqrt() - gammas[c]).abs() < 1e-4,
            "criterion 4: FAIL bn channel {c} raw std {} vs gamma {}",
            v_out.sqrt(),
            gammas[c]
        );
    }
    println!(
        "criterion 4: PASS strict WN statistics, wn_add variance, exact BN (beta, gamma) at 1e-6"
    );
}

#[test]
fn criterion_5_builder_fidelity() {
    let (d, g) = build_dcgan(Variant::Wn, 160, 64, 256, 5).unwrap();
    let expect_d = [
        ("SWNConv", 4, 2, 1, 64),
        ("SWNConv", 4, 2, 1, 128),
        ("SWNConv", 4, 2, 1, 256),
        ("SWNConv", 4, 2, 1, 512),
        ("SWNConv", 4, 2, 1, 1024),
        ("AWNConv", 5, 1, 0, 1),
    ];
    let dt = d.conv_table();
    assert_eq!(dt.len(), expect_d.len(), "criterion 5: FAIL disc depth");
    for (row, &(l, k, s, p, o)) in dt.iter().zip(expect_d.iter()) {
        assert_eq!(
            (row.layer, row.kernel, row.stride, row.pad, row.out),
            (l, k, s, p, o),
            "criterion 5: FAIL disc row mismatch"
        );
    }
    let expect_g = [
        ("SWNConv", 5, 1, 0, 1024),
        ("SWNConv", 4, 2, 1, 512),
        ("SWNConv", 4, 2, 1, 256),
        ("SWNConv", 4, 2, 1, 128),
        ("SWNConv", 4, 2, 1, 64),
        ("AWNConv", 4, 2, 1, 3),
    ];
    let gt = g.conv_table();
    assert_eq!(gt.len(), expect_g.len(), "criterion 5: FAIL gen depth");
    for (row, &(l, k, s, p, o)) in gt.iter().zip(expect_g.iter()) {
        assert_eq!(
            (row.layer, row.kernel, row.stride, row.pad, row.out),
            (l, k, s, p, o),
            "criterion 5: FAIL gen row mismatch"
        );
    }

    let (rd, rg) = build_resnet_gan(Variant::Wn, 160, &[64, 128, 256, 384, 512], 128, 5).unwrap();
    assert_eq!(rd.conv_layer_count(), 21, "criterion 5: FAIL resnet disc depth");
    assert_eq!(rg.conv_layer_count(), 21, "criterion 5: FAIL resnet gen depth");
    println!("criterion 5: PASS reference DCGAN table and 21-layer residual plan");
}

struct SmokeSetup {
    dataset: Dataset,
    split: DatasetSplit,
    config: TrainConfig,
    eval_cfg: EvalConfig,
}

fn gauss_setup(seed: u64) -> SmokeSetup {
    let dataset = data::gauss2d_mixture(1024, 5);
    let split = data::split(dataset.len(), 128, seed).unwrap();
    let config = TrainConfig {
        lr: 1e-3,
        batch_size: 32,
        latent_dim: 8,
        total_iters: 2000,
        eval_every: 500,
        seed,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let eval_cfg = EvalConfig {
        steps: 50,
        n_samples: 64,
        ..EvalConfig::running()
    };
    SmokeSetup {
        dataset,
        split,
        config,
        eval_cfg,
    }
}

fn shapes_setup(seed: u64) -> SmokeSetup {
    let dataset = data::synthetic_shapes(8, 512, 6);
    let split = data::split(dataset.len(), 64, seed).unwrap();
    let config = TrainConfig {
        lr: 2e-4,
        batch_size: 16,
        latent_dim: 16,
        total_iters: 2000,
        eval_every: 500,
        seed,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let eval_cfg = EvalConfig {
        steps: 50,
        n_samples: 32,
        ..EvalConfig::running()
    };
    SmokeSetup {
        dataset,
        split,
        config,
        eval_cfg,
    }
}

fn build_pair(setup: &SmokeSetup, variant: Variant, mlp: bool) -> TrainState {
    let (d, g) = if mlp {
        build_mlp_gan(variant, 2, 32, setup.config.latent_dim, true).unwrap()
    } else {
        build_dcgan(variant, 8, 8, setup.config.latent_dim, 2).unwrap()
    };
    TrainState::init(&d, &g, setup.config.clone()).unwrap()
}

/// Runs one smoke training; returns (loss at iteration 0, running loss at
/// 2000, all metric losses finite).
fn smoke_run(
    setup: &SmokeSetup,
    variant: Variant,
    mlp: bool,
    out: &std::path::Path,
) -> (f64, f64, bool) {
    let mut state = build_pair(setup, variant, mlp);
    let subset_idx =
        training::eval_subset_indices(&setup.split, setup.config.seed, setup.eval_cfg.n_samples);
    let subset = setup.dataset.gather(&subset_idx).unwrap();
    let report0 =
        evaluation::running_eval(&state.gen, &subset, &setup.eval_cfg, "iter_0").unwrap();

    let outcome =
        training::train_loop(&mut state, &setup.dataset, &setup.split, &setup.eval_cfg, out)
            .unwrap();
    let rows = training::read_metrics(&outcome.metrics_path).unwrap();
    assert_eq!(rows.len() as u64, setup.config.total_iters);
    let finite = rows
        .iter()
        .all(|r| r.loss_d.is_finite() && r.loss_g.is_finite());
    let at_2000 = rows
        .iter()
        .rev()
        .find_map(|r| r.running_rec_loss)
        .expect("running eval at 2000");
    (report0.mean_loss, at_2000, finite)
}

#[test]
fn criterion_6_training_smoke_gauss_mixture() {
    for variant in [Variant::Vanilla, Variant::Bn, Variant::Wn] {
        let started = Instant::now();
        let setup = gauss_setup(11);
        let out = tmp_dir(&format!("c6_gauss_{variant:?}"));
        let (loss0, loss2000, finite) = smoke_run(&setup, variant, true, &out);
        let elapsed = started.elapsed();
        assert!(finite, "criterion 6: FAIL {variant:?} non-finite losses");
        assert!(
            elapsed.as_secs() < 600,
            "criterion 6: FAIL {variant:?} runtime {elapsed:?}"
        );
        if variant == Variant::Wn {
            assert!(
                loss2000 <= 0.5 * loss0,
                "criterion 6: FAIL wn gauss improvement {loss0} -> {loss2000}"
            );
        }
        println!(
            "criterion 6: PASS gauss {variant:?}: running loss {loss0:.5} -> {loss2000:.5}, {:.0} s",
            elapsed.as_secs_f64()
        );
        std::fs::remove_dir_all(&out).ok();
    }
}

#[test]
fn criterion_6_training_smoke_shapes() {
    for variant in [Variant::Vanilla, Variant::Bn, Variant::Wn] {
        let started = Instant::now();
        let setup = shapes_setup(12);
        let out = tmp_dir(&format!("c6_shapes_{variant:?}"));
        let (loss0, loss2000, finite) = smoke_run(&setup, variant, false, &out);
        let elapsed = started.elapsed();
        assert!(finite, "criterion 6: FAIL {variant:?} non-finite losses");
        assert!(
            elapsed.as_secs() < 600,
            "criterion 6: FAIL {variant:?} runtime {elapsed:?} over 10 min"
        );
        if variant == Variant::Wn {
            assert!(
                loss2000 <= 0.5 * loss0,
                "criterion 6: FAIL wn shapes improvement {loss0} -> {loss2000}"
            );
        }
        println!(
            "criterion 6: PASS shapes {variant:?}: running loss {loss0:.5} -> {loss2000:.5}, {:.0} s",
            elapsed.as_secs_f64()
        );
        std::fs::remove_dir_all(&out).ok();
    }
}

#[test]
fn criterion_7_identity_inversion() {
    // identity stub over an image-sized code: per-pixel normalization at
    // this scale puts the optimizer in its stable contraction regime
    const SIDE: usize = 64;
    const NUMEL: usize = 3 * SIDE * SIDE;
    struct Identity;
    impl LatentGenerator for Identity {
        fn latent_dim(&self) -> usize {
            NUMEL
        }
        fn sample_shape(&self) -> Vec<usize> {
            vec![3, SIDE, SIDE]
        }
        fn generate(&self, tape: &mut Tape, z: NodeId) -> wngan_core::Result<NodeId> {
            let batch = tape.value(z).shape()[0];
            tape.reshape(z, vec![batch, 3, SIDE, SIDE])
        }
    }
    let gen = Identity;
    let mut rng = DetRng::new(70);
    let mut td = vec![0.0; 3 * NUMEL];
    rng.fill_uniform(&mut td, 0.0, 1.0);
    let targets = Tensor::from_vec(vec![3, 3, SIDE, SIDE], td).unwrap();
    let cfg = EvalConfig {
        steps: 2000,
        lr: 0.01,
        n_samples: 3,
        ..EvalConfig::running()
    };
    let started = Instant::now();
    let r1 = evaluation::final_eval(&gen, &targets, &cfg, "identity").unwrap();
    for (i, l) in r1.per_sample_loss.iter().enumerate() {
        assert!(*l < 1e-6, "criterion 7: FAIL sample {i} loss {l}");
    }
    let r2 = evaluation::final_eval(&gen, &targets, &cfg, "identity").unwrap();
    assert_eq!(
        r1.per_sample_loss, r2.per_sample_loss,
        "criterion 7: FAIL nondeterministic report"
    );
    assert_eq!(r1.mean_loss, r2.mean_loss);
    println!(
        "criterion 7: PASS identity inversion mean per-pixel loss {:.3e}, deterministic, {:.1} s",
        r1.mean_loss,
        started.elapsed().as_secs_f64()
    );
}

#[test]
fn criterion_8_qualitative_ordering_reported() {
    // non-gating: trains each variant to 10k iterations on the shapes
    // dataset, runs the full evaluation on the best checkpoint, and
    // reports whether the ordering (wn <= vanilla, wn < bn) holds
    let mut finals = Vec::new();
    for variant in [Variant::Vanilla, Variant::Bn, Variant::Wn] {
        let setup = shapes_setup(12);
        let out = tmp_dir(&format!("c8_shapes_{variant:?}"));
        let mut state = build_pair(&setup, variant, false);
        state.config.total_iters = 10_000;
        let outcome =
            training::train_loop(&mut state, &setup.dataset, &setup.split, &setup.eval_cfg, &out)
                .unwrap();
        let best = outcome
            .best_checkpoint
            .as_ref()
            .expect("best checkpoint saved");
        let best_state = checkpoint::load(best).unwrap();
        let test = setup.dataset.gather(&setup.split.test).unwrap();
        let final_cfg = EvalConfig {
            steps: 2000,
            n_samples: setup.split.test.len(),
            ..EvalConfig::final_eval()
        };
        let report =
            evaluation::final_eval(&best_state.gen, &test, &final_cfg, "best").unwrap();
        assert!(
            report.mean_loss.is_finite(),
            "criterion 8: FAIL {variant:?} non-finite final loss"
        );
        println!(
            "criterion 8: {variant:?} best iteration {} running {:.6} final {:.6}",
            outcome.best_iter, outcome.best_running_loss, report.mean_loss
        );
        finals.push((variant, report.mean_loss));
        std::fs::remove_dir_all(&out).ok();
    }
    let get = |v: Variant| finals.iter().find(|(var, _)| *var == v).unwrap().1;
    let (vanilla, bn, wn) = (get(Variant::Vanilla), get(Variant::Bn), get(Variant::Wn));
    let ordering_holds = wn <= vanilla && wn < bn;
    println!(
        "criterion 8: REPORTED (non-gating) final losses wn {wn:.6}, vanilla {vanilla:.6}, \
         bn {bn:.6}; ordering wn <= vanilla && wn < bn: {ordering_holds}"
    );
}

#[test]
fn criterion_9_checkpoint_roundtrip_and_resume() {
    let setup = gauss_setup(13);
    let (d, g) = build_mlp_gan(Variant::Wn, 2, 16, setup.config.latent_dim, true).unwrap();
    let mut config = setup.config.clone();
    config.total_iters = 60;
    config.eval_every = 20;
    config.checkpoint_every = 30;

    // uninterrupted run
    let out_a = tmp_dir("c9_full");
    let mut state_a = TrainState::init(&d, &g, config.clone()).unwrap();
    training::train_loop(&mut state_a, &setup.dataset, &setup.split, &setup.eval_cfg, &out_a)
        .unwrap();
    let rows_a = training::read_metrics(&out_a.join("metrics.csv")).unwrap();

    // interrupted at 30, resumed from the checkpoint
    let out_b = tmp_dir("c9_half");
    let mut config_b = config.clone();
    config_b.total_iters = 30;
    let mut state_b = TrainState::init(&d, &g, config_b).unwrap();
    training::train_loop(&mut state_b, &setup.dataset, &setup.split, &setup.eval_cfg, &out_b)
        .unwrap();

    let loaded = checkpoint::load(&out_b.join("ckpt_30.ckpt")).unwrap();
    // bitwise round trip
    let reencoded = checkpoint::encode(&checkpoint::decode(&checkpoint::encode(&loaded)).unwrap());
    assert_eq!(
        checkpoint::encode(&loaded),
        reencoded,
        "criterion 9: FAIL checkpoint re-encode differs"
    );

    let out_c = tmp_dir("c9_resumed");
    let mut resumed = loaded;
    resumed.config.total_iters = 60;
    training::train_loop(&mut resumed, &setup.dataset, &setup.split, &setup.eval_cfg, &out_c)
        .unwrap();
    let rows_c = training::read_metrics(&out_c.join("metrics.csv")).unwrap();

    assert_eq!(rows_c.len(), 30, "criterion 9: FAIL resumed row count");
    for (a, c) in rows_a[30..].iter().zip(rows_c.iter()) {
        assert_eq!(a.iter, c.iter);
        assert_eq!(
            (a.loss_d, a.loss_g, a.running_rec_loss),
            (c.loss_d, c.loss_g, c.running_rec_loss),
            "criterion 9: FAIL metrics differ at iteration {} after resume",
            a.iter
        );
    }
    assert_eq!(state_a.disc, resumed.disc, "criterion 9: FAIL disc params differ");
    assert_eq!(state_a.gen, resumed.gen, "criterion 9: FAIL gen params differ");
    println!("criterion 9: PASS bitwise checkpoint round trip and bitwise resumed metrics");

    for dir in [out_a, out_b, out_c] {
        std::fs::remove_dir_all(&dir).ok();
    }
}
