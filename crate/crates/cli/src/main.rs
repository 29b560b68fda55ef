//! Command-line surface for the weight-normalized GAN toolkit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::{Deserialize, Serialize};
use wngan_core::checkpoint;
use wngan_core::data::{self, DatasetOptions};
use wngan_core::equivalence;
use wngan_core::evaluation::{self, EvalConfig, LatentGenerator};
use wngan_core::gradcheck;
use wngan_core::layers::Mode;
use wngan_core::lipschitz::{self, BoundLayer};
use wngan_core::netbuild::{
    build_dcgan, build_mlp_gan, build_resnet_gan, ForwardCtx, LayerSpec, Network, NetworkSpec,
    Variant,
};
use wngan_core::ppm;
use wngan_core::rng::DetRng;
use wngan_core::tape::Tape;
use wngan_core::tensor::Tensor;
use wngan_core::training::{self, TrainConfig, TrainState};

const USAGE: &str = "\
wngan - weight-normalized GAN toolkit

USAGE:
  wngan train --config <json> --dataset <name|path> --variant <vanilla|bn|wn> --out <dir>
  wngan eval --checkpoint <file> --dataset <name|path> --steps <n> --lr <f> --out <report.json>
  wngan gradcheck [--layer <name>] --trials <n>
  wngan equiv-check --depth <n> --width <n> --trials <n>
  wngan lipschitz-check --spec <json> --trials <n>
  wngan sample --checkpoint <file> --count <n> --seed <s> --out <grid.ppm>
  wngan curve --metrics <csv> --column <name> --out <csv|svg>

Builtin datasets: gauss2d-mixture, rings, synthetic-shapes-8x8, or a
directory of .ppm/.pgm files.

Exit codes: 0 success, 1 failed check or runtime error, 2 usage error.
";

// ── session config ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum NetConfig {
    Dcgan {
        image_size: usize,
        base_features: usize,
        min_spatial: usize,
    },
    Resnet {
        image_size: usize,
        features: Vec<usize>,
        min_spatial: usize,
    },
    Mlp {
        hidden: usize,
    },
}

fn default_dataset_size() -> usize {
    2048
}

fn default_test_size() -> usize {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionConfig {
    #[serde(default)]
    train: TrainConfig,
    #[serde(default = "EvalConfig::running")]
    eval: EvalConfig,
    net: NetConfig,
    #[serde(default = "default_dataset_size")]
    dataset_size: usize,
    #[serde(default = "default_test_size")]
    test_size: usize,
}

// ── tiny flag parser ────────────────────────────────────────────────────

struct Flags {
    values: BTreeMap<String, String>,
}

#[derive(Debug)]
struct UsageError(String);

fn parse_flags(args: &[String], allowed: &[&str]) -> Result<Flags, UsageError> {
    let mut values = BTreeMap::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let name = arg
            .strip_prefix("--")
            .ok_or_else(|| UsageError(format!("unexpected argument '{arg}'")))?;
        if !allowed.contains(&name) {
            return Err(UsageError(format!("unknown flag '--{name}'")));
        }
        let value = args
            .get(i + 1)
            .ok_or_else(|| UsageError(format!("flag '--{name}' needs a value")))?;
        values.insert(name.to_string(), value.clone());
        i += 2;
    }
    Ok(Flags { values })
}

impl Flags {
    fn required(&self, name: &str) -> Result<&str, UsageError> {
        self.values
            .get(name)
            .map(|s| s.as_str())
            .ok_or_else(|| UsageError(format!("missing required flag '--{name}'")))
    }

    fn optional(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(|s| s.as_str())
    }

    fn parse_num<T: std::str::FromStr>(&self, name: &str) -> Result<T, UsageError> {
        let raw = self.required(name)?;
        raw.parse()
            .map_err(|_| UsageError(format!("flag '--{name}': cannot parse '{raw}'")))
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return ExitCode::from(2);
    };
    let rest = &args[1..];
    let outcome = match command.as_str() {
        "train" => cmd_train(rest),
        "eval" => cmd_eval(rest),
        "gradcheck" => cmd_gradcheck(rest),
        "equiv-check" => cmd_equiv_check(rest),
        "lipschitz-check" => cmd_lipschitz_check(rest),
        "sample" => cmd_sample(rest),
        "curve" => cmd_curve(rest),
        other => Err(CmdError::Usage(UsageError(format!(
            "unknown command '{other}'"
        )))),
    };
    match outcome {
        Ok(code) => code,
        Err(CmdError::Usage(UsageError(msg))) => {
            eprintln!("error: {msg}\n");
            eprint!("{USAGE}");
            ExitCode::from(2)
        }
        Err(CmdError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

enum CmdError {
    Usage(UsageError),
    Run(wngan_core::Error),
}

impl From<UsageError> for CmdError {
    fn from(e: UsageError) -> Self {
        CmdError::Usage(e)
    }
}

impl From<wngan_core::Error> for CmdError {
    fn from(e: wngan_core::Error) -> Self {
        CmdError::Run(e)
    }
}

type CmdResult = Result<ExitCode, CmdError>;

fn read_config(path: &str) -> Result<SessionConfig, CmdError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CmdError::Run(wngan_core::Error::Parse(format!("config {path}: {e}"))))?;
    serde_json::from_str(&text)
        .map_err(|e| CmdError::Run(wngan_core::Error::Parse(format!("config {path}: {e}"))))
}

fn dataset_options(cfg: &SessionConfig) -> DatasetOptions {
    let image_size = match cfg.net {
        NetConfig::Dcgan { image_size, .. } | NetConfig::Resnet { image_size, .. } => {
            Some(image_size)
        }
        NetConfig::Mlp { .. } => None,
    };
    DatasetOptions {
        size: cfg.dataset_size,
        seed: cfg.train.seed,
        image_size,
    }
}

fn build_networks(
    cfg: &SessionConfig,
    variant: Variant,
    data_shape: &[usize],
) -> Result<(NetworkSpec, NetworkSpec), wngan_core::Error> {
    match &cfg.net {
        NetConfig::Dcgan {
            image_size,
            base_features,
            min_spatial,
        } => build_dcgan(
            variant,
            *image_size,
            *base_features,
            cfg.train.latent_dim,
            *min_spatial,
        ),
        NetConfig::Resnet {
            image_size,
            features,
            min_spatial,
        } => build_resnet_gan(
            variant,
            *image_size,
            features,
            cfg.train.latent_dim,
            *min_spatial,
        ),
        NetConfig::Mlp { hidden } => {
            let data_dim = data_shape.iter().product();
            build_mlp_gan(variant, data_dim, *hidden, cfg.train.latent_dim, true)
        }
    }
}

fn cmd_train(args: &[String]) -> CmdResult {
    let flags = parse_flags(args, &["config", "dataset", "variant", "out"])?;
    let cfg = read_config(flags.required("config")?)?;
    let variant =
        Variant::parse(flags.required("variant")?).map_err(|e| UsageError(e.to_string()))?;
    let out_dir = PathBuf::from(flags.required("out")?);

    let dataset = data::load_dataset(flags.required("dataset")?, &dataset_options(&cfg))?;
    let split = data::split(dataset.len(), cfg.test_size.min(dataset.len() / 2), cfg.train.seed)?;
    let (disc_spec, gen_spec) = build_networks(&cfg, variant, &dataset.sample_shape)?;

    let mut state = TrainState::init(&disc_spec, &gen_spec, cfg.train.clone())?;
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| wngan_core::Error::io(out_dir.display().to_string(), e))?;
    // resolved session settings, so later eval runs can reproduce the
    // dataset split exactly
    let session_path = out_dir.join("session.json");
    std::fs::write(&session_path, serde_json::to_string_pretty(&cfg).unwrap())
        .map_err(|e| wngan_core::Error::io(session_path.display().to_string(), e))?;
    let outcome = training::train_loop(&mut state, &dataset, &split, &cfg.eval, &out_dir)?;
    println!(
        "trained {} iterations; best running loss {} at iteration {}",
        state.iter, outcome.best_running_loss, outcome.best_iter
    );
    println!("metrics: {}", outcome.metrics_path.display());
    println!("last checkpoint: {}", outcome.last_checkpoint.display());
    if let Some(best) = outcome.best_checkpoint {
        println!("best checkpoint: {}", best.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: &[String]) -> CmdResult {
    let flags = parse_flags(args, &["checkpoint", "dataset", "steps", "lr", "out"])?;
    let ckpt_path = flags.required("checkpoint")?;
    let steps: usize = flags.parse_num("steps")?;
    let lr: f64 = flags.parse_num("lr")?;
    let out = PathBuf::from(flags.required("out")?);

    let state = checkpoint::load(Path::new(ckpt_path))?;
    let gen = state.gen;
    let image_size = match gen.spec.output_shape.as_slice() {
        [_, h, _] => Some(*h),
        _ => None,
    };
    // a session.json written by `train` next to the checkpoint pins the
    // dataset sizing; otherwise fall back to the defaults
    let session: Option<SessionConfig> = Path::new(ckpt_path)
        .parent()
        .map(|dir| dir.join("session.json"))
        .filter(|p| p.exists())
        .and_then(|p| std::fs::read_to_string(p).ok())
        .and_then(|text| serde_json::from_str(&text).ok());
    let (dataset_size, test_size) = session
        .map(|s| (s.dataset_size, s.test_size))
        .unwrap_or((default_dataset_size(), default_test_size()));
    let opts = DatasetOptions {
        size: dataset_size,
        seed: state.config.seed,
        image_size,
    };
    let dataset = data::load_dataset(flags.required("dataset")?, &opts)?;
    let split = data::split(
        dataset.len(),
        test_size.min(dataset.len() / 2),
        state.config.seed,
    )?;
    let test = dataset.gather(&split.test)?;

    let eval_cfg = EvalConfig {
        steps,
        lr,
        ..EvalConfig::final_eval()
    };
    let report = evaluation::final_eval(&gen, &test, &eval_cfg, ckpt_path)?;
    std::fs::write(&out, report.to_json())
        .map_err(|e| wngan_core::Error::io(out.display().to_string(), e))?;
    let csv_path = out.with_extension("samples.csv");
    std::fs::write(&csv_path, report.per_sample_csv())
        .map_err(|e| wngan_core::Error::io(csv_path.display().to_string(), e))?;
    println!(
        "final reconstruction loss {} over {} samples ({} steps); report: {}",
        report.mean_loss,
        report.per_sample_loss.len(),
        report.steps,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: &[String]) -> CmdResult {
    let flags = parse_flags(args, &["layer", "trials"])?;
    let trials: usize = flags.parse_num("trials")?;
    let reports = gradcheck::gradient_suite(trials, 7, flags.optional("layer"))?;
    let mut all_pass = true;
    let json: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            all_pass &= r.pass;
            serde_json::json!({
                "layer": r.name,
                "points": r.points,
                "max_rel_err": r.max_rel_err,
                "pass": r.pass,
                "failure": r.failure,
            })
        })
        .collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "pass": all_pass,
            "layers": json,
        }))
        .unwrap()
    );
    Ok(if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_equiv_check(args: &[String]) -> CmdResult {
    let flags = parse_flags(args, &["depth", "width", "trials"])?;
    // depth n means a (2n+1)-layer alternating stack: n+1 linear layers
    let depth: usize = flags.parse_num("depth")?;
    let width: usize = flags.parse_num("width")?;
    let trials: usize = flags.parse_num("trials")?;
    if depth == 0 {
        return Err(UsageError("--depth must be at least 1".into()).into());
    }
    if width == 0 || trials == 0 {
        return Err(UsageError("--width and --trials must be positive".into()).into());
    }

    let mut rng = DetRng::new(2024);
    let mut max_output_diff: f64 = 0.0;
    let mut max_roundtrip: f64 = 0.0;
    let stacks = 5;
    for _ in 0..stacks {
        let mut widths = vec![width];
        for _ in 0..depth + 1 {
            widths.push(1 + rng.below(width));
        }
        let stack = equivalence::random_stack(&widths, &mut rng);
        let report = equivalence::check_equivalence(&stack, trials, &mut rng)?;
        max_output_diff = max_output_diff.max(report.max_output_diff);
        max_roundtrip = max_roundtrip.max(report.max_roundtrip_err);
    }
    let pass = max_output_diff < 1e-9 && max_roundtrip < 1e-12;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "depth": depth,
            "layers": 2 * depth + 1,
            "width": width,
            "stacks": stacks,
            "inputs_per_stack": trials,
            "max_output_discrepancy": max_output_diff,
            "max_roundtrip_error": max_roundtrip,
            "pass": pass,
        }))
        .unwrap()
    );
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_lipschitz_check(args: &[String]) -> CmdResult {
    let flags = parse_flags(args, &["spec", "trials"])?;
    let spec_path = flags.required("spec")?;
    let trials: usize = flags.parse_num("trials")?;
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| wngan_core::Error::io(spec_path.to_string(), e))?;
    let disc_spec = NetworkSpec::from_json(&text)?;
    let critic_spec = lipschitz::make_critic(&disc_spec)?;
    let budget = lipschitz::budget_for_spec(&critic_spec)?;

    let mut bound_reports = Vec::new();
    for layer in critic_spec.layers.iter() {
        let kind = match layer {
            LayerSpec::StrictWnLinear { in_dim, out_dim } => Some(BoundLayer::StrictLinear {
                out_dim: *out_dim,
                in_dim: *in_dim,
            }),
            LayerSpec::WnConv {
                c_in,
                c_out,
                kernel,
                stride,
                ..
            } => Some(BoundLayer::StrictConv {
                c_in: *c_in,
                c_out: *c_out,
                kernel: *kernel,
                stride: *stride,
            }),
            LayerSpec::TPRelu { channels } => Some(BoundLayer::TPRelu {
                channels: *channels,
            }),
            _ => None,
        };
        if let Some(kind) = kind {
            bound_reports.push(lipschitz::check_gradient_bound(kind, trials, 5)?);
        }
    }

    let critic = Network::init(&critic_spec, &mut DetRng::new(1));
    let probe = lipschitz::empirical_lipschitz(&critic, budget.k, trials, 6)?;

    let bounds_pass = bound_reports.iter().all(|r| r.pass);
    let pass = bounds_pass && probe.pass;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "budget": budget,
            "per_layer_bounds": bound_reports,
            "empirical_probe": probe,
            "pass": pass,
        }))
        .unwrap()
    );
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_sample(args: &[String]) -> CmdResult {
    let flags = parse_flags(args, &["checkpoint", "count", "seed", "out"])?;
    let count: usize = flags.parse_num("count")?;
    if count == 0 {
        return Err(UsageError("--count must be at least 1".into()).into());
    }
    let seed: u64 = flags.parse_num("seed")?;
    let out = PathBuf::from(flags.required("out")?);
    let state = checkpoint::load(Path::new(flags.required("checkpoint")?))?;
    let gen = state.gen;

    let mut rng = DetRng::new(seed);
    let mut zd = vec![0.0; count * gen.latent_dim()];
    rng.fill_normal(&mut zd);
    let z = Tensor::from_vec(vec![count, gen.latent_dim()], zd)?;

    let mut tape = Tape::new();
    let zn = tape.leaf(z);
    let staged = gen.stage(&mut tape);
    let mut ctx = ForwardCtx::default();
    let samples = staged.forward(&mut tape, zn, Mode::Inference, &mut ctx)?;
    let value = tape.value(samples.out);
    let image = if value.ndim() == 4 {
        ppm::tile_grid(value)?
    } else {
        ppm::scatter_plot(value, 128)?
    };
    ppm::write_ppm(&out, &image)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_curve(args: &[String]) -> CmdResult {
    let flags = parse_flags(args, &["metrics", "column", "out"])?;
    let metrics_path = PathBuf::from(flags.required("metrics")?);
    let column = flags.required("column")?;
    let out = PathBuf::from(flags.required("out")?);

    let rows = training::read_metrics(&metrics_path)?;
    let points: Vec<(u64, f64)> = rows
        .iter()
        .filter_map(|r| {
            let v = match column {
                "loss_d" => Some(r.loss_d),
                "loss_g" => Some(r.loss_g),
                "running_rec_loss" => r.running_rec_loss,
                "wall_ms" => Some(r.wall_ms as f64),
                _ => None,
            };
            v.map(|v| (r.iter, v))
        })
        .collect();
    if !["loss_d", "loss_g", "running_rec_loss", "wall_ms"].contains(&column) {
        return Err(UsageError(format!(
            "--column must be one of loss_d, loss_g, running_rec_loss, wall_ms; got '{column}'"
        ))
        .into());
    }
    if points.is_empty() {
        return Err(CmdError::Run(wngan_core::Error::Parse(format!(
            "no data points for column '{column}' in {}",
            metrics_path.display()
        ))));
    }

    let text = match out.extension().and_then(|s| s.to_str()) {
        Some("svg") => svg_curve(&points, column),
        _ => {
            let mut s = format!("iter,{column}\n");
            for (i, v) in &points {
                s.push_str(&format!("{i},{v}\n"));
            }
            s
        }
    };
    std::fs::write(&out, text).map_err(|e| wngan_core::Error::io(out.display().to_string(), e))?;
    println!("wrote {} points to {}", points.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn svg_curve(points: &[(u64, f64)], label: &str) -> String {
    let (w, h, margin) = (640.0, 400.0, 40.0);
    let x_min = points.first().unwrap().0 as f64;
    let x_max = points.last().unwrap().0 as f64;
    let y_min = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y_max = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let x_span = (x_max - x_min).max(1e-12);
    let y_span = (y_max - y_min).max(1e-12);
    let coords: Vec<String> = points
        .iter()
        .map(|(x, y)| {
            let px = margin + (*x as f64 - x_min) / x_span * (w - 2.0 * margin);
            let py = h - margin - (y - y_min) / y_span * (h - 2.0 * margin);
            format!("{px:.2},{py:.2}")
        })
        .collect();
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"20\" font-family=\"monospace\" font-size=\"14\">{label}: {ymin:.6} .. {ymax:.6}</text>\n",
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{pts}\"/>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        tx = margin,
        label = label,
        ymin = y_min,
        ymax = y_max,
        pts = coords.join(" ")
    )
}
