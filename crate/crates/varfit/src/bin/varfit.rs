//! Batch CLI over the varfit library: train, generate, eval, profile,
//! privacy-report, synth-data. Exit codes: 0 success, 2 config error,
//! 3 data error, 4 numeric error, 5 privacy-budget stop.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use varfit::cli::{
    self, parse_adapter, DataSource, PrivacyReportArgs, ProfileArgs, RunConfig,
};
use varfit::data::{SplitTag, SynthSpec};
use varfit::dp::PrivacySpec;
use varfit::error::Error;
use varfit::flops::DpSampling;
use varfit::model::{SampleOpts, VarConfig};
use varfit::trainer::Precision;

#[derive(Parser)]
#[command(name = "varfit", version, about = "Next-scale autoregressive image modeling with parameter-efficient and differentially private fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune a model and write run artifacts.
    Train(TrainArgs),
    /// Sample images from a checkpoint.
    Generate(GenerateArgs),
    /// Score generated images against a real split (FID, precision, recall).
    Eval(EvalArgs),
    /// Analytic FLOP cost of a training step and run.
    Profile(CliProfileArgs),
    /// Privacy spend of a checkpoint or explicit mechanism parameters.
    PrivacyReport(PrivacyReportCli),
    /// Write a procedural PNG dataset.
    SynthData(SynthDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for manifest, metrics and checkpoints.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,

    // config-file overrides, mirroring the JSON field names
    #[arg(long)]
    adapter: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Comma-separated LoRA targets (attention_qkv, attention_proj, mlp, adaln).
    #[arg(long)]
    targets: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Enables DP-SGD with this target epsilon.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Enables DP-SGD with this explicit noise multiplier.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    sample_rate: Option<f64>,
    #[arg(long)]
    k_aug: Option<usize>,
    /// Dataset directory (PNG tree). Overrides the config data source.
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    class: usize,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "samples")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run config providing the evaluation split.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Precomputed real-features JSON (external-import mode).
    #[arg(long)]
    real_features: Option<PathBuf>,
    /// Precomputed generated-features JSON (external-import mode).
    #[arg(long)]
    gen_features: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    knn_k: usize,
    #[arg(long)]
    max_per_class: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CliProfileArgs {
    #[arg(long, default_value_t = 2)]
    depth: usize,
    /// Embedding width; defaults to the 64*depth family convention.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, default_value = "fft")]
    adapter: String,
    #[arg(long, default_value_t = 16)]
    rank: usize,
    #[arg(long, default_value_t = 32.0)]
    alpha: f64,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    k_aug: usize,
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    /// DP mode: Poisson sample rate (requires --dp-n).
    #[arg(long)]
    dp_q: Option<f64>,
    /// DP mode: dataset size.
    #[arg(long)]
    dp_n: Option<usize>,
    /// Per-component CSV output path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Use the desk-scale toy geometry instead of the full-scale family.
    #[arg(long, default_value_t = false)]
    toy: bool,
}

#[derive(Args)]
struct PrivacyReportCli {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    sample_rate: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    clip_norm: Option<f64>,
}

#[derive(Args)]
struct SynthDataArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = ["train", "test"], default_value = "train")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

fn apply_train_overrides(cfg: &mut RunConfig, args: &TrainArgs) -> Result<(), Error> {
    if let Some(name) = &args.adapter {
        let base = cfg.train.adapter.clone();
        cfg.train.adapter = parse_adapter(
            name,
            args.rank.unwrap_or(if base.rank > 0 { base.rank } else { 16 }),
            args.alpha.unwrap_or(if base.alpha > 0.0 { base.alpha } else { 32.0 }),
            args.dropout.unwrap_or(base.dropout),
            args.targets.as_deref(),
        )?;
    }
    if let Some(v) = args.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.momentum {
        cfg.train.momentum = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(p) = &args.precision {
        cfg.train.precision = match p.as_str() {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => return Err(Error::Config(format!("unknown precision '{other}'"))),
        };
    }
    if let Some(v) = args.eval_every {
        cfg.train.eval_every = v;
    }
    if let Some(v) = args.max_steps {
        cfg.train.max_steps = Some(v);
    }
    if args.epsilon.is_some() || args.sigma.is_some() {
        let mut privacy = match (args.epsilon, args.sigma) {
            (Some(e), None) => PrivacySpec::with_epsilon(e, 0.5, 0.05, 1),
            (None, Some(s)) => PrivacySpec::with_sigma(s, 0.5, 0.05, 1),
            _ => {
                return Err(Error::Config(
                    "give exactly one of --epsilon and --sigma".into(),
                ))
            }
        };
        privacy.delta = args.delta;
        if let Some(c) = args.clip_norm {
            privacy.clip_norm = c;
        }
        if let Some(q) = args.sample_rate {
            privacy.sample_rate = q;
        }
        if let Some(k) = args.k_aug {
            privacy.k_aug = k;
        }
        cfg.train.privacy = Some(privacy);
    } else if let Some(privacy) = cfg.train.privacy.as_mut() {
        if let Some(d) = args.delta {
            privacy.delta = Some(d);
        }
        if let Some(c) = args.clip_norm {
            privacy.clip_norm = c;
        }
        if let Some(q) = args.sample_rate {
            privacy.sample_rate = q;
        }
        if let Some(k) = args.k_aug {
            privacy.k_aug = k;
        }
    }
    if let Some(root) = &args.data_root {
        cfg.data = DataSource::Root {
            root: root.clone(),
            image_size: args.image_size.unwrap_or(16),
        };
    }
    if let Some(d) = args.depth {
        cfg.model.depth = d;
    }
    if let Some(w) = args.width {
        cfg.model.width = w;
    }
    if let Some(h) = args.heads {
        cfg.model.heads = h;
    }
    Ok(())
}

fn run() -> Result<i32, Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => {
            let mut cfg = match &args.config {
                Some(path) => RunConfig::from_json_file(path)?,
                None => RunConfig::desk_default(),
            };
            apply_train_overrides(&mut cfg, &args)?;
            cli::run_train(&cfg, &args.out)
        }
        Command::Generate(args) => {
            cli::run_generate(
                &args.checkpoint,
                args.class,
                args.count,
                args.size,
                SampleOpts {
                    temperature: args.temperature,
                    top_k: args.top_k,
                },
                args.seed,
                &args.out,
            )?;
            Ok(0)
        }
        Command::Eval(args) => {
            let cfg = match &args.config {
                Some(path) => Some(RunConfig::from_json_file(path)?),
                None => None,
            };
            cli::run_eval(
                args.checkpoint.as_deref(),
                cfg.as_ref(),
                args.real_features.as_deref(),
                args.gen_features.as_deref(),
                args.knn_k,
                args.max_per_class,
                args.seed,
            )?;
            Ok(0)
        }
        Command::Profile(args) => {
            let config = if args.toy {
                VarConfig {
                    depth: args.depth,
                    width: args.width.unwrap_or(32),
                    heads: args.heads.unwrap_or(2),
                    ..VarConfig::toy()
                }
            } else {
                let mut c = VarConfig::full_scale(args.depth);
                if let Some(w) = args.width {
                    c.width = w;
                }
                if let Some(h) = args.heads {
                    c.heads = h;
                }
                c
            };
            let dp = match (args.dp_q, args.dp_n) {
                (Some(q), Some(n)) => Some(DpSampling { q, n }),
                (None, None) => None,
                _ => {
                    return Err(Error::Config(
                        "--dp-q and --dp-n must be given together".into(),
                    ))
                }
            };
            cli::run_profile(&ProfileArgs {
                adapter: parse_adapter(&args.adapter, args.rank, args.alpha, 0.0, None)?,
                config,
                batch: args.batch,
                k_aug: args.k_aug,
                steps: args.steps,
                dp,
                csv: args.csv,
            })?;
            Ok(0)
        }
        Command::PrivacyReport(args) => {
            cli::run_privacy_report(&PrivacyReportArgs {
                checkpoint: args.checkpoint,
                sigma: args.sigma,
                sample_rate: args.sample_rate,
                delta: args.delta,
                steps: args.steps,
                clip_norm: args.clip_norm,
            })?;
            Ok(0)
        }
        Command::SynthData(args) => {
            let split = if args.split == "test" {
                SplitTag::Test
            } else {
                SplitTag::Train
            };
            cli::run_synth_data(
                &SynthSpec {
                    num_classes: args.classes,
                    per_class: args.per_class,
                    size: args.size,
                    seed: args.seed,
                    hue_shift: 0.0,
                    hue_span: 360.0,
                },
                split,
                &args.out,
            )?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
