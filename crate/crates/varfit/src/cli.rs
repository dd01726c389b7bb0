//! Run configuration, run-directory artifacts, and the implementations
//! behind the `varfit` command-line verbs. The binary itself only parses
//! arguments and dispatches here.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{apply_adapter, AdapterKind, AdapterSpec, AdapterTarget};
use crate::checkpoint::{
    load_checkpoint, save_full, CheckpointMeta, PrecisionTag,
};
use crate::data::{load_dataset, save_dataset_png, save_png, synth_dataset, Dataset, SplitTag, SynthSpec};
use crate::dp::epsilon_of;
use crate::error::{contract, Error, Result};
use crate::flops::{step_flops, total_cost, DpSampling, StepCost};
use crate::metrics::FeatureExtractor;
use crate::model::{SampleOpts, VarConfig, VarModel};
use crate::rng::derive_rng;
use crate::tensor::Real;
use crate::tokenizer::{decode, Codebook};
use crate::trainer::{
    evaluate_model, train, EvalProtocol, MetricsRecord, Precision, StopReason, TrainConfig,
};

/// Dataset source: a PNG directory tree or the procedural generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Root { root: PathBuf, image_size: usize },
    Synth(SynthSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodebookConfig {
    pub vocab: usize,
    pub seed: u64,
    /// K-means refinement passes over the training images; 0 falls back to
    /// the seeded random codebook.
    pub kmeans_iters: usize,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            seed: 7,
            kmeans_iters: 12,
        }
    }
}

/// The complete run configuration (JSON config file schema).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: VarConfig,
    pub data: DataSource,
    #[serde(default)]
    pub codebook: CodebookConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalProtocol,
    /// Seed for base-model initialization.
    #[serde(default)]
    pub model_seed: u64,
    /// Seed for adapter initialization.
    #[serde(default)]
    pub adapter_seed: u64,
}

impl RunConfig {
    /// Desk-scale defaults: toy model on a 4-class synthetic set.
    pub fn desk_default() -> Self {
        Self {
            model: VarConfig::toy(),
            data: DataSource::Synth(SynthSpec {
                num_classes: 4,
                per_class: 500,
                size: 16,
                seed: 0,
                hue_shift: 0.0,
                hue_span: 360.0,
            }),
            codebook: CodebookConfig::default(),
            train: TrainConfig::default(),
            eval: EvalProtocol::default(),
            model_seed: 0,
            adapter_seed: 0,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))
    }

    pub fn load_data(&self, split: SplitTag) -> Result<Dataset> {
        match &self.data {
            DataSource::Root { root, image_size } => load_dataset(root, *image_size, split),
            DataSource::Synth(spec) => synth_dataset(spec, split),
        }
    }

    pub fn build_codebook(&self, train: &Dataset) -> Result<Codebook> {
        let channels = 3;
        if self.codebook.kmeans_iters == 0 {
            Codebook::seeded(self.codebook.vocab, channels, self.codebook.seed)
        } else {
            let images: Vec<_> = train.items.iter().map(|i| i.image.clone()).collect();
            Codebook::kmeans(
                self.codebook.vocab,
                channels,
                self.codebook.seed,
                &images,
                &self.model.patch_nums,
                self.codebook.kmeans_iters,
            )
        }
    }
}

/// Written once at run start; never mutated afterwards. Completion status
/// goes to a separate `run_summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub code_version: String,
    pub started_at: String,
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub finished_at: String,
    pub steps_run: u64,
    pub stop_reason: StopReason,
    pub final_epsilon: Option<f64>,
}

fn now_iso() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Exit code 5 marks a clean privacy-budget stop.
pub const EXIT_BUDGET_STOP: i32 = 5;

/// `train` verb: prepares data, codebook and model, runs fine-tuning,
/// streams `metrics.jsonl`, and writes checkpoints under `run_dir`.
/// Returns the process exit code.
pub fn run_train(config: &RunConfig, run_dir: &Path) -> Result<i32> {
    config.model.validate()?;
    config.train.validate()?;
    fs::create_dir_all(run_dir)?;

    let train_set = config.load_data(SplitTag::Train)?;
    let test_set = config.load_data(SplitTag::Test)?;
    if config.model.vocab != config.codebook.vocab {
        return Err(Error::Config(format!(
            "model vocab {} differs from codebook size {}",
            config.model.vocab, config.codebook.vocab
        )));
    }
    if train_set
        .items
        .iter()
        .any(|it| it.class_id >= config.model.num_classes)
    {
        return Err(Error::Config(
            "dataset has more classes than the model".into(),
        ));
    }

    let manifest = RunManifest {
        config: config.clone(),
        seeds: [
            ("model".to_string(), config.model_seed),
            ("adapter".to_string(), config.adapter_seed),
            ("train".to_string(), config.train.seed),
            ("eval".to_string(), config.eval.seed),
        ]
        .into_iter()
        .collect(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at: now_iso(),
        artifacts: [
            ("metrics".to_string(), "metrics.jsonl".to_string()),
            ("summary".to_string(), "run_summary.json".to_string()),
        ]
        .into_iter()
        .collect(),
    };
    fs::write(
        run_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;

    match config.train.precision {
        Precision::F32 => run_train_typed::<f32>(config, run_dir, &train_set, &test_set),
        Precision::F64 => run_train_typed::<f64>(config, run_dir, &train_set, &test_set),
    }
}

fn run_train_typed<T: Real>(
    config: &RunConfig,
    run_dir: &Path,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<i32> {
    let codebook = config.build_codebook(train_set)?;
    let base = VarModel::<T>::init(config.model.clone(), config.model_seed)?;
    let adapted = apply_adapter(base, config.train.adapter.clone(), config.adapter_seed)?;

    let metrics_path = run_dir.join("metrics.jsonl");
    let mut metrics_file = fs::File::create(&metrics_path)?;
    let mut sink = |rec: &MetricsRecord| {
        let line = serde_json::to_string(rec).expect("record serializes");
        let _ = writeln!(metrics_file, "{line}");
    };

    let outcome = train(
        &config.train,
        train_set,
        test_set,
        adapted,
        &codebook,
        &config.eval,
        Some(&mut sink),
    )?;

    let ckpt_path = run_dir.join(format!("ckpt_{:06}.varfit", outcome.steps_run));
    save_full(
        &ckpt_path,
        &outcome.model,
        config.adapter_seed,
        Some(&codebook),
        outcome.steps_run,
        config.train.privacy.as_ref(),
        outcome.ledger.as_ref(),
    )?;

    let summary = RunSummary {
        finished_at: now_iso(),
        steps_run: outcome.steps_run,
        stop_reason: outcome.stop_reason,
        final_epsilon: outcome.ledger.as_ref().map(|l| l.epsilon_spent()),
    };
    fs::write(
        run_dir.join("run_summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;

    println!(
        "run complete: {} steps, checkpoint {}",
        outcome.steps_run,
        ckpt_path.display()
    );
    Ok(match outcome.stop_reason {
        StopReason::Completed => 0,
        StopReason::PrivacyBudget => EXIT_BUDGET_STOP,
    })
}

/// `generate` verb: samples `count` images of `class` from a checkpoint and
/// writes PNGs.
pub fn run_generate(
    ckpt: &Path,
    class: usize,
    count: usize,
    size: usize,
    opts: SampleOpts,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let meta = peek_meta(ckpt)?;
    match meta.precision {
        PrecisionTag::F32 => generate_typed::<f32>(ckpt, class, count, size, opts, seed, out_dir),
        PrecisionTag::F64 => generate_typed::<f64>(ckpt, class, count, size, opts, seed, out_dir),
    }
}

fn generate_typed<T: Real>(
    ckpt: &Path,
    class: usize,
    count: usize,
    size: usize,
    opts: SampleOpts,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    let loaded = load_checkpoint::<T>(ckpt)?;
    let codebook = loaded
        .codebook
        .clone()
        .ok_or_else(|| contract("checkpoint holds no codebook; cannot decode tokens"))?;
    let model = loaded.into_adapted()?;
    let labels = vec![class; count];
    let mut rng = derive_rng(seed, &[0x9e4]);
    let tokens = model.generate_batch(&labels, opts, &mut rng)?;
    for (i, t) in tokens.iter().enumerate() {
        let img = decode(t, &codebook, size)?;
        save_png(&img, &out_dir.join(format!("class{class}_{i:04}.png")))?;
    }
    println!("wrote {count} samples to {}", out_dir.display());
    Ok(())
}

/// `eval` verb: class-matched generation against a real split, or a direct
/// comparison of two precomputed feature files. Prints one JSON record.
#[allow(clippy::too_many_arguments)]
pub fn run_eval(
    ckpt: Option<&Path>,
    config: Option<&RunConfig>,
    real_features: Option<&Path>,
    gen_features: Option<&Path>,
    knn_k: usize,
    max_per_class: Option<usize>,
    seed: u64,
) -> Result<()> {
    let record = if let (Some(rf), Some(gf)) = (real_features, gen_features) {
        let real = crate::metrics::load_features_json(rf)?;
        let generated = crate::metrics::load_features_json(gf)?;
        let fid = crate::metrics::fid(
            &crate::metrics::feature_stats(&real)?,
            &crate::metrics::feature_stats(&generated)?,
        )?;
        let (p, r) = crate::metrics::precision_recall(&real, &generated, knn_k)?;
        crate::trainer::EvalRecord {
            fid,
            precision: p,
            recall: r,
            n_real: real.len(),
            n_gen: generated.len(),
            k: knn_k,
            extractor_seed: 0,
        }
    } else {
        let ckpt = ckpt.ok_or_else(|| {
            Error::Config("eval needs either --checkpoint or two feature files".into())
        })?;
        let config = config
            .ok_or_else(|| Error::Config("eval with a checkpoint needs --config for data".into()))?;
        let test_set = config.load_data(SplitTag::Test)?;
        let protocol = EvalProtocol {
            knn_k,
            max_per_class,
            seed,
            ..config.eval.clone()
        };
        let meta = peek_meta(ckpt)?;
        match meta.precision {
            PrecisionTag::F32 => eval_typed::<f32>(ckpt, &test_set, &protocol)?,
            PrecisionTag::F64 => eval_typed::<f64>(ckpt, &test_set, &protocol)?,
        }
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&record).expect("record serializes")
    );
    Ok(())
}

fn eval_typed<T: Real>(
    ckpt: &Path,
    test_set: &Dataset,
    protocol: &EvalProtocol,
) -> Result<crate::trainer::EvalRecord> {
    let loaded = load_checkpoint::<T>(ckpt)?;
    let codebook = loaded
        .codebook
        .clone()
        .ok_or_else(|| contract("checkpoint holds no codebook"))?;
    let model = loaded.into_adapted()?;
    evaluate_model(&model, &codebook, test_set, protocol)
}

/// `profile` verb options.
pub struct ProfileArgs {
    pub config: VarConfig,
    pub adapter: AdapterSpec,
    pub batch: usize,
    pub k_aug: usize,
    pub steps: u64,
    pub dp: Option<DpSampling>,
    pub csv: Option<PathBuf>,
}

/// `profile` verb: analytic step cost plus run total, JSON to stdout and an
/// optional per-component CSV.
pub fn run_profile(args: &ProfileArgs) -> Result<()> {
    let step = step_flops(&args.config, &args.adapter, args.batch, args.k_aug)?;
    let run = total_cost(&step, args.steps, args.dp)?;
    if let Some(csv) = &args.csv {
        write_breakdown_csv(csv, &step)?;
    }
    let report = serde_json::json!({
        "forward_flops": step.forward_flops as f64,
        "backward_flops": step.backward_flops as f64,
        "weight_grad_flops": step.weight_grad_flops as f64,
        "per_step_total": step.per_step_total as f64,
        "batch": step.batch,
        "k_aug": step.k_aug,
        "run": run,
        "note": if run.is_expectation {
            "total is an expectation over Poisson lot sizes, not a measurement"
        } else {
            "exact"
        },
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn write_breakdown_csv(path: &Path, step: &StepCost) -> Result<()> {
    let mut out = String::from("component,flops\n");
    for (name, flops) in &step.breakdown {
        out.push_str(&format!("{name},{flops}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// `privacy-report` verb: from a checkpoint's ledger, or from explicit
/// mechanism parameters.
pub struct PrivacyReportArgs {
    pub checkpoint: Option<PathBuf>,
    pub sigma: Option<f64>,
    pub sample_rate: Option<f64>,
    pub delta: Option<f64>,
    pub steps: Option<u64>,
    pub clip_norm: Option<f64>,
}

pub fn run_privacy_report(args: &PrivacyReportArgs) -> Result<()> {
    let (epsilon, delta, sigma, clip, q, steps) = if let Some(ckpt) = &args.checkpoint {
        let meta = peek_meta(ckpt)?;
        let ledger = meta
            .ledger
            .ok_or_else(|| contract("checkpoint holds no privacy ledger"))?;
        let clip = meta.privacy.as_ref().map(|p| p.clip_norm);
        (
            ledger.epsilon_spent(),
            ledger.delta(),
            ledger.sigma(),
            clip,
            ledger.sample_rate(),
            ledger.steps(),
        )
    } else {
        let sigma = args
            .sigma
            .ok_or_else(|| Error::Config("privacy-report needs --checkpoint or --sigma".into()))?;
        let q = args
            .sample_rate
            .ok_or_else(|| Error::Config("--sample-rate required".into()))?;
        let delta = args
            .delta
            .ok_or_else(|| Error::Config("--delta required".into()))?;
        let steps = args
            .steps
            .ok_or_else(|| Error::Config("--steps required".into()))?;
        (
            epsilon_of(sigma, q, steps, delta)?,
            delta,
            sigma,
            args.clip_norm,
            q,
            steps,
        )
    };
    let report = serde_json::json!({
        "epsilon": epsilon,
        "delta": delta,
        "sigma": sigma,
        "clip_norm": clip,
        "sample_rate": q,
        "steps": steps,
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

/// `synth-data` verb: writes a procedural PNG dataset tree.
pub fn run_synth_data(spec: &SynthSpec, split: SplitTag, out: &Path) -> Result<()> {
    let data = synth_dataset(spec, split)?;
    save_dataset_png(&data, out)?;
    println!(
        "wrote {} images ({} classes) to {}",
        data.len(),
        data.num_classes(),
        out.display()
    );
    Ok(())
}

/// Reads only the metadata block of a checkpoint (still digest-validated).
pub fn peek_meta(path: &Path) -> Result<CheckpointMeta> {
    // both precisions share the metadata layout; try either
    match load_checkpoint::<f32>(path) {
        Ok(c) => Ok(c.meta),
        Err(Error::Format(_)) => load_checkpoint::<f64>(path).map(|c| c.meta),
        Err(e) => Err(e),
    }
}

/// Parses an adapter name used on the command line: `fft`, `lora`,
/// `ln_tuning`, or an ablation variant name.
pub fn parse_adapter(
    name: &str,
    rank: usize,
    alpha: f64,
    dropout: f64,
    targets: Option<&str>,
) -> Result<AdapterSpec> {
    let mut spec = match name {
        "fft" => AdapterSpec::fft(),
        "lora" => AdapterSpec::lora(rank, alpha, dropout, &AdapterTarget::ALL),
        "ln_tuning" | "lntuning" => AdapterSpec::ln_tuning(),
        other => AdapterSpec::ablation_variant(other)?,
    };
    if let Some(list) = targets {
        if spec.kind != AdapterKind::Lora {
            return Err(Error::Config(
                "--targets only applies to LoRA adapters".into(),
            ));
        }
        spec.targets = list
            .split(',')
            .map(AdapterTarget::parse)
            .collect::<Result<_>>()?;
    }
    Ok(spec)
}

/// Default feature extractor for CLI evaluation paths.
pub fn default_extractor(seed: u64) -> FeatureExtractor {
    FeatureExtractor::fixed_random_conv(seed, 64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::desk_default();
        cfg.data = DataSource::Synth(SynthSpec {
            num_classes: 4,
            per_class: 6,
            size: 16,
            seed: 2,
            hue_shift: 0.0,
            hue_span: 360.0,
        });
        cfg.train.epochs = 1;
        cfg.train.max_steps = Some(2);
        cfg.train.eval_every = 2;
        cfg.train.batch_size = 8;
        cfg.eval.max_per_class = Some(4);
        let _ = dir;
        cfg
    }

    #[test]
    fn train_verb_writes_all_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let run_dir = tmp.path().join("run");
        let cfg = tiny_config(tmp.path());
        let code = run_train(&cfg, &run_dir).unwrap();
        assert_eq!(code, 0);
        assert!(run_dir.join("manifest.json").exists());
        assert!(run_dir.join("metrics.jsonl").exists());
        assert!(run_dir.join("run_summary.json").exists());
        assert!(run_dir.join("ckpt_000002.varfit").exists());

        // metrics lines parse and start at step 0
        let text = fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
        let lines: Vec<MetricsRecord> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines[0].step, 0);
        assert!(lines.len() >= 2);

        // manifest round-trips
        let manifest: RunManifest =
            serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest.code_version, env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn generate_and_eval_from_checkpoint() {
        let tmp = tempfile::tempdir().unwrap();
        let run_dir = tmp.path().join("run");
        let cfg = tiny_config(tmp.path());
        run_train(&cfg, &run_dir).unwrap();
        let ckpt = run_dir.join("ckpt_000002.varfit");

        let out = tmp.path().join("samples");
        run_generate(
            &ckpt,
            1,
            3,
            16,
            SampleOpts::default(),
            9,
            &out,
        )
        .unwrap();
        assert_eq!(fs::read_dir(&out).unwrap().count(), 3);

        run_eval(Some(&ckpt), Some(&cfg), None, None, 3, Some(4), 0).unwrap();
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = RunConfig::desk_default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.model, cfg.model);
    }

    #[test]
    fn adapter_parsing() {
        assert_eq!(parse_adapter("fft", 0, 0.0, 0.0, None).unwrap().kind, AdapterKind::Fft);
        let lora = parse_adapter("lora", 8, 16.0, 0.0, Some("mlp,adaln")).unwrap();
        assert_eq!(lora.targets.len(), 2);
        assert!(parse_adapter("LoRA-A", 0, 0.0, 0.0, None).is_ok());
        assert!(parse_adapter("bogus", 0, 0.0, 0.0, None).is_err());
        assert!(parse_adapter("fft", 0, 0.0, 0.0, Some("mlp")).is_err());
    }
}
