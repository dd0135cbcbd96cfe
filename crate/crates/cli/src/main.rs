//! `sparse-mlp`: train, evaluate, gradient-check and inspect Sparse-MLP
//! models. Reports are tab-separated with a header line.
//!
//! Exit codes: 0 on success, 1 on user errors (bad flags, configs, data,
//! checkpoints, or a gradient check that found no routing-stable point),
//! 2 when a gradient check fails its tolerance.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use sparse_mlp::config::{ModelConfig, RunConfig, PRESETS};
use sparse_mlp::data::{Dataset, SynthSpec};
use sparse_mlp::io::{load_checkpoint, read_dataset, save_checkpoint, Checkpoint};
use sparse_mlp::model::{build_model, count_params, Architecture};
use sparse_mlp::train::{evaluate, routing_stats, train_epoch, OptimState, TrainReport};
use sparse_mlp::verify::{model_gradcheck, DENSE_TOL, FD_STEP, SPARSE_TOL};
use sparse_mlp::{Error, Rng};

/// Re-seeds tried by `gradcheck` before giving up on an unstable point.
const GRADCHECK_ATTEMPTS: u64 = 16;

#[derive(Parser, Debug)]
#[command(name = "sparse-mlp", version, about = "Sparse-MLP: MLP-Mixer with sparse mixture-of-experts blocks")]
struct Cli {
    /// Worker threads for the matrix kernels (default: all cores).
    #[arg(long, global = true, env = "SPARSE_MLP_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Report accuracy and mean loss of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Per-MoE-layer routing statistics of a checkpoint on a dataset.
    Stats(EvalArgs),
    /// Count the parameters a config implies.
    Params(ParamsArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Config file or preset name; optional with --resume.
    #[arg(long)]
    config: Option<String>,
    /// Dataset directory, or `synth:K=4,n=512,hw=8,...`.
    #[arg(long, default_value = "synth:")]
    data: String,
    /// Epochs to run now [default: from the config].
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: from the config]
    #[arg(long)]
    batch: Option<usize>,
    /// [default: from the config]
    #[arg(long)]
    lr: Option<f64>,
    /// Balance-loss weight [default: from the config].
    #[arg(long)]
    aux_weight: Option<f64>,
    /// Seeds initialization, shuffling and gate noise [default: from the config].
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory, or `synth:K=4,n=512,hw=8,...`.
    #[arg(long)]
    data: String,
    #[arg(long, default_value_t = 128)]
    batch: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Config file or preset name.
    #[arg(long)]
    config: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest accepted relative error [default: 1e-5 without MoE layers, 1e-4 with].
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, default_value_t = FD_STEP)]
    step: f64,
    /// Samples in the checked batch.
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = sparse_mlp::moe::AUX_WEIGHT)]
    aux_weight: f64,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    /// Config file or preset name.
    #[arg(long)]
    config: String,
}

/// A preset name, or a path to a config file.
fn resolve_config(spec: &str) -> Result<RunConfig> {
    let path = Path::new(spec);
    if path.exists() {
        return RunConfig::load(path).with_context(|| format!("loading config {}", path.display()));
    }
    RunConfig::preset(spec).with_context(|| {
        format!("`{spec}` is neither a config file nor a preset ({})", PRESETS.join(", "))
    })
}

fn load_data(spec: &str, cfg: &ModelConfig) -> Result<Dataset> {
    let data = match spec.strip_prefix("synth:") {
        Some(rest) => SynthSpec::parse(rest)?.generate()?,
        None => read_dataset(Path::new(spec), Some(cfg.classes))
            .with_context(|| format!("reading dataset {spec}"))?,
    };
    let want = (cfg.image_height, cfg.image_width, cfg.channels);
    if data.image_dims() != want {
        bail!("dataset images are {:?} (H, W, Ch) but the model expects {want:?}", data.image_dims());
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= cfg.classes) {
        bail!("label {bad} is out of range for {} classes", cfg.classes);
    }
    if data.is_empty() {
        bail!("dataset is empty");
    }
    Ok(data)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let mut ckpt = match (&args.resume, &args.config) {
        (Some(dir), _) => {
            let ckpt = load_checkpoint(dir).with_context(|| format!("resuming from {}", dir.display()))?;
            if let Some(spec) = &args.config {
                if resolve_config(spec)?.model != ckpt.config.model {
                    bail!("--config describes a different model than the checkpoint in {}", dir.display());
                }
            }
            ckpt
        }
        (None, Some(spec)) => {
            let mut config = resolve_config(spec)?;
            if let Some(seed) = args.seed {
                config.train.seed = seed;
            }
            let mut rng = Rng::new(config.train.seed);
            let model = build_model(&config.model, &mut rng)?;
            let optim = OptimState::new(&model.params, config.train.lr)?;
            Checkpoint {
                config,
                model,
                optim,
                rng,
                epoch: 0,
            }
        }
        (None, None) => bail!("train needs --config or --resume"),
    };
    if args.resume.is_some() && args.seed.is_some() {
        warn!("--seed is ignored when resuming; the checkpoint's generator state is used");
    }
    let train = &mut ckpt.config.train;
    if let Some(v) = args.lr {
        train.lr = v;
    }
    if let Some(v) = args.batch {
        train.batch = v;
    }
    if let Some(v) = args.aux_weight {
        train.aux_weight = v;
    }
    if let Some(v) = args.epochs {
        train.epochs = v;
    }
    if !(train.lr >= 0.0 && train.lr.is_finite()) || !(train.aux_weight >= 0.0 && train.aux_weight.is_finite()) {
        bail!("--lr and --aux-weight must be finite and non-negative");
    }
    if train.batch == 0 {
        bail!("--batch must be positive");
    }
    ckpt.optim.lr = train.lr;
    let train = train.clone();
    let data = load_data(&args.data, &ckpt.config.model)?;

    println!("epoch\ttask_loss\taux_loss\taccuracy");
    let mut report = TrainReport::default();
    for _ in 0..train.epochs {
        train_epoch(
            &mut ckpt.model,
            &data,
            train.batch,
            train.aux_weight,
            &mut ckpt.optim,
            &mut ckpt.rng,
            &mut report,
        )?;
        ckpt.epoch += 1;
        let e = report.epochs.last().expect("epoch recorded");
        println!("{}\t{:.6}\t{:.6}\t{:.4}", ckpt.epoch, e.task_loss, e.aux_loss, e.accuracy);
    }
    save_checkpoint(&args.out, &ckpt).with_context(|| format!("writing checkpoint {}", args.out.display()))?;
    info!("checkpoint written to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let data = load_data(&args.data, &ckpt.config.model)?;
    let (accuracy, loss) = evaluate(&ckpt.model, &data, args.batch)?;
    println!("samples\taccuracy\tmean_loss");
    println!("{}\t{accuracy:.4}\t{loss:.6}", data.len());
    Ok(ExitCode::SUCCESS)
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn cmd_stats(args: EvalArgs) -> Result<ExitCode> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let data = load_data(&args.data, &ckpt.config.model)?;
    let stats = routing_stats(&ckpt.model, &data, args.batch)?;
    if stats.is_empty() {
        println!("no MoE layers");
        return Ok(ExitCode::SUCCESS);
    }
    println!("layer\tmode\titems\timportance\tload\timportance_cv2\tload_cv2\thistogram");
    for s in stats {
        let imp: Vec<String> = s.importance.iter().map(|v| format!("{v:.4}")).collect();
        let load: Vec<String> = s.load.iter().map(|v| format!("{v:.4}")).collect();
        println!(
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}",
            s.name,
            match s.mode {
                sparse_mlp::moe::MixingMode::Token => "token",
                sparse_mlp::moe::MixingMode::Channel => "channel",
            },
            s.items,
            imp.join(","),
            load.join(","),
            s.importance_cv2,
            s.load_cv2,
            join(&s.histogram),
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let cfg = resolve_config(&args.config)?.model;
    let routed = Architecture::new(&cfg)?.moe_stages() > 0;
    let tolerance = args
        .tolerance
        .unwrap_or(if routed { SPARSE_TOL } else { DENSE_TOL });
    if args.batch == 0 || !args.step.is_finite() || args.step <= 0.0 {
        bail!("--batch and --step must be positive");
    }
    for seed in args.seed..args.seed + GRADCHECK_ATTEMPTS {
        let report = match model_gradcheck(&cfg, seed, args.batch, args.aux_weight, args.step, tolerance) {
            Ok(r) => r,
            Err(Error::Unstable(why)) => {
                warn!("seed {seed}: {why}; re-seeding");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        println!("tensor\tmax_rel_error\tindex\tanalytic\tnumeric");
        for t in &report.tensors {
            println!("{}\t{:.3e}\t{}\t{:.6e}\t{:.6e}", t.name, t.max_rel, t.worst_index, t.analytic, t.numeric);
        }
        let verdict = if report.passed() { "pass" } else { "FAIL" };
        println!(
            "# seed {seed}\tmax {:.3e} in {}\ttolerance {:.1e}\tmargin {:.3e}\t{verdict}",
            report.max_rel, report.worst, tolerance, report.margin
        );
        return Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(2) });
    }
    bail!(
        "no routing-stable point found for seeds {}..{}; try another --seed",
        args.seed,
        args.seed + GRADCHECK_ATTEMPTS
    )
}

fn cmd_params(args: ParamsArgs) -> Result<ExitCode> {
    let cfg = resolve_config(&args.config)?.model;
    let n = count_params(&cfg)?;
    println!("config\tparams\tmillions");
    println!("{}\t{n}\t{:.1}", args.config, n as f64 / 1e6);
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot configure {threads} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Params(a) => cmd_params(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
