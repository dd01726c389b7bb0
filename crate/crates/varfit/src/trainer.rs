//! Fine-tuning orchestration: non-private SGD over shuffled batches, or
//! DP-SGD over Poisson lots with augmentation multiplicity, plus the metric
//! timeline and evaluation protocol.
//!
//! Every stochastic component draws from an RNG derived from the run seed
//! and the step index, so runs replay bit-identically (wall time aside) and
//! a resumed run composes privacy exactly like an uninterrupted one. In DP
//! mode, clipped per-sample gradients are consumed only by
//! [`crate::dp::privatize_step`]; the loop never reads one after
//! aggregation.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSpec, AdaptedModel};
use crate::data::Dataset;
use crate::dp::{
    augmented_per_sample_grad, flatten_named, named_gradients, poisson_sample, privatize_step,
    unflatten_named, Augmentation, PrivacyLedger, PrivacySpec,
};
use crate::error::{contract, Result};
use crate::flops::{step_flops, total_cost, DpSampling};
use crate::metrics::{feature_stats, fid, precision_recall, FeatureExtractor};
use crate::model::{ForwardMode, SampleOpts};
use crate::rng::derive_rng;
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{decode, encode, Codebook, MultiScaleTokens};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Default for Precision {
    fn default() -> Self {
        Precision::F32
    }
}

/// One fine-tuning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adapter: AdapterSpec,
    pub learning_rate: f64,
    /// Non-private momentum; DP runs use plain SGD regardless.
    pub momentum: f64,
    /// Batch size for non-private runs; DP lots come from the sample rate.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    pub privacy: Option<PrivacySpec>,
    /// Augmentation family for DP multiplicity views.
    pub augmentation: Option<Augmentation>,
    pub eval_every: u64,
    /// Optional hard cap on optimizer steps (testing/budgeting).
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adapter: AdapterSpec::lora_default(),
            learning_rate: 5e-4,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            precision: Precision::F32,
            privacy: None,
            augmentation: Some(Augmentation::default()),
            eval_every: 200,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(contract("learning rate must be positive"));
        }
        if self.epochs < 1 {
            return Err(contract("epochs must be >= 1"));
        }
        if self.momentum < 0.0 || self.momentum >= 1.0 {
            return Err(contract("momentum must be in [0, 1)"));
        }
        if self.privacy.is_none() && self.batch_size == 0 {
            return Err(contract("batch size must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(contract("eval_every must be >= 1"));
        }
        if let Some(p) = &self.privacy {
            p.validate()?;
        }
        Ok(())
    }

    /// Steps per epoch: full batches over the shuffled set, or the expected
    /// full-pass step count `ceil(1/q)` under Poisson sampling.
    pub fn steps_per_epoch(&self, dataset_size: usize) -> u64 {
        match &self.privacy {
            Some(p) => (1.0 / p.sample_rate).ceil() as u64,
            None => (dataset_size as u64).div_ceil(self.batch_size as u64),
        }
    }

    pub fn planned_steps(&self, dataset_size: usize) -> u64 {
        let steps = self.steps_per_epoch(dataset_size) * self.epochs as u64;
        match self.max_steps {
            Some(cap) => steps.min(cap),
            None => steps,
        }
    }
}

/// Sampling and metric settings for timeline evaluations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub knn_k: usize,
    pub extractor: FeatureExtractor,
    /// Cap on per-class counts (applied to both real and generated sides,
    /// preserving per-class parity); `None` matches the split exactly.
    pub max_per_class: Option<usize>,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            knn_k: 3,
            extractor: FeatureExtractor::fixed_random_conv(0, 64),
            max_per_class: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalRecord {
    pub fid: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_real: usize,
    pub n_gen: usize,
    pub k: usize,
    pub extractor_seed: u64,
}

/// One timeline entry per evaluation point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub train_loss: f64,
    pub fid: f64,
    pub precision: f64,
    pub recall: f64,
    pub wall_time_s: f64,
    pub cumulative_flops: f64,
    pub epsilon_spent: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsTimeline {
    pub records: Vec<MetricsRecord>,
}

impl MetricsTimeline {
    fn push(&mut self, rec: MetricsRecord) {
        if let Some(last) = self.records.last() {
            assert!(rec.step > last.step, "timeline steps must increase");
            if let (Some(prev), Some(cur)) = (last.epsilon_spent, rec.epsilon_spent) {
                assert!(cur >= prev, "epsilon must be non-decreasing");
            }
        }
        self.records.push(rec);
    }

    /// Equality over everything except wall time, which is the one field
    /// that cannot reproduce across runs.
    pub fn deterministic_eq(&self, other: &Self) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.step == b.step
                    && a.train_loss == b.train_loss
                    && a.fid == b.fid
                    && a.precision == b.precision
                    && a.recall == b.recall
                    && a.cumulative_flops == b.cumulative_flops
                    && a.epsilon_spent == b.epsilon_spent
            })
    }
}

/// Why the loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    /// The next step would exceed the epsilon target; stopped cleanly.
    PrivacyBudget,
}

pub struct TrainOutcome<T: Real> {
    pub model: AdaptedModel<T>,
    pub timeline: MetricsTimeline,
    pub steps_run: u64,
    pub stop_reason: StopReason,
    pub ledger: Option<PrivacyLedger>,
}

struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    fn apply<T: Real>(
        &mut self,
        model: &mut AdaptedModel<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        for (name, g) in grads {
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let cur = model.param(name)?;
            let mut next = cur.data().to_vec();
            for ((x, vel), gv) in next.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vel = self.momentum * *vel + gv.as_f64();
                *x = *x - T::from_f64(self.lr * *vel);
            }
            model.set_param(name, Tensor::new(cur.shape().to_vec(), next)?)?;
        }
        Ok(())
    }
}

/// Pre-encodes every dataset image once (deterministic; reused each epoch).
pub fn encode_dataset(dataset: &Dataset, codebook: &Codebook, patch_nums: &[usize]) -> Result<Vec<MultiScaleTokens>> {
    dataset
        .items
        .par_iter()
        .map(|it| encode(&it.image, codebook, patch_nums))
        .collect()
}

/// Class-matched evaluation: generates as many samples per class as the
/// split holds (optionally capped on both sides), decodes them, and scores
/// FID and k-NN precision/recall in feature space.
pub fn evaluate_model<T: Real>(
    model: &AdaptedModel<T>,
    codebook: &Codebook,
    split: &Dataset,
    protocol: &EvalProtocol,
) -> Result<EvalRecord> {
    if split.is_empty() {
        return Err(contract("evaluation split is empty"));
    }
    let num_classes = model.config().num_classes;
    if split.items.iter().any(|it| it.class_id >= num_classes) {
        return Err(contract(format!(
            "split contains class ids outside the model's {num_classes} classes"
        )));
    }
    let image_size = split.image_size();

    // class-matched label multiset and the matching real subset
    let mut labels = Vec::new();
    let mut real_indices = Vec::new();
    for class in 0..split.num_classes() {
        let mut idx = split.indices_of_class(class);
        if let Some(cap) = protocol.max_per_class {
            idx.truncate(cap);
        }
        labels.extend(std::iter::repeat(class).take(idx.len()));
        real_indices.extend(idx);
    }

    let opts = SampleOpts {
        temperature: protocol.temperature,
        top_k: protocol.top_k,
    };
    let mut gen_images = Vec::with_capacity(labels.len());
    for (chunk_idx, chunk) in labels.chunks(64).enumerate() {
        let mut rng = derive_rng(protocol.seed, &[0xe7a1, chunk_idx as u64]);
        let tokens = model.generate_batch(chunk, opts, &mut rng)?;
        for t in tokens {
            gen_images.push(decode(&t, codebook, image_size)?);
        }
    }

    let real_refs: Vec<&crate::data::Image> = real_indices
        .iter()
        .map(|&i| &split.items[i].image)
        .collect();
    let gen_refs: Vec<&crate::data::Image> = gen_images.iter().collect();
    let real_feats = protocol.extractor.extract_batch(&real_refs)?;
    let gen_feats = protocol.extractor.extract_batch(&gen_refs)?;

    let fid_value = fid(&feature_stats(&real_feats)?, &feature_stats(&gen_feats)?)?;
    let (p, r) = precision_recall(&real_feats, &gen_feats, protocol.knn_k)?;
    Ok(EvalRecord {
        fid: fid_value,
        precision: p,
        recall: r,
        n_real: real_feats.len(),
        n_gen: gen_feats.len(),
        k: protocol.knn_k,
        extractor_seed: protocol.extractor.seed,
    })
}

/// Runs fine-tuning; `on_record` fires for every timeline entry as it is
/// produced (the CLI streams these to `metrics.jsonl`).
pub fn train<T: Real>(
    config: &TrainConfig,
    dataset: &Dataset,
    eval_split: &Dataset,
    mut model: AdaptedModel<T>,
    codebook: &Codebook,
    protocol: &EvalProtocol,
    mut on_record: Option<&mut dyn FnMut(&MetricsRecord)>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(contract("training dataset is empty"));
    }
    let n = dataset.len();
    let patch_nums = model.config().patch_nums.clone();
    let planned = config.planned_steps(n);
    let start = Instant::now();

    // privacy resolution
    let mut ledger = None;
    let mut sigma = 0.0;
    let mut epsilon_target = None;
    if let Some(privacy) = &config.privacy {
        sigma = privacy.resolve_sigma(n, planned)?;
        let delta = privacy.resolve_delta(n);
        ledger = Some(PrivacyLedger::new(sigma, privacy.sample_rate, delta)?);
        epsilon_target = privacy.epsilon_target;
    }

    // per-step expected cost for the timeline
    let flops_batch = match &config.privacy {
        Some(p) => p.logical_lot_size(n).max(1),
        None => config.batch_size.min(n),
    };
    let k_aug = config.privacy.as_ref().map(|p| p.k_aug).unwrap_or(1);
    let step_cost = step_flops(model.config(), model.spec(), flops_batch, k_aug)?;
    let per_step_flops = match &config.privacy {
        Some(p) => {
            total_cost(&step_cost, 1, Some(DpSampling { q: p.sample_rate, n }))?.total_pflops
                * 1e15
        }
        None => step_cost.per_step_total as f64,
    };

    let tokens = if config.privacy.is_none() {
        encode_dataset(dataset, codebook, &patch_nums)?
    } else {
        Vec::new()
    };

    let mut timeline = MetricsTimeline::default();
    let mut last_loss;
    let mut stop_reason = StopReason::Completed;
    let mut steps_run = 0u64;
    let mut sgd = Sgd::new(
        config.learning_rate,
        if config.privacy.is_some() {
            0.0
        } else {
            config.momentum
        },
    );

    // step-0 record
    {
        let eval = evaluate_model(&model, codebook, eval_split, protocol)?;
        let probe: Vec<usize> = (0..n.min(32)).collect();
        last_loss = probe_loss(&model, dataset, codebook, &probe, config.seed, 0)?;
        let rec = MetricsRecord {
            step: 0,
            train_loss: last_loss,
            fid: eval.fid,
            precision: eval.precision,
            recall: eval.recall,
            wall_time_s: start.elapsed().as_secs_f64(),
            cumulative_flops: 0.0,
            epsilon_spent: ledger.as_ref().map(|l| l.epsilon_spent()),
        };
        if let Some(cb) = on_record.as_mut() {
            cb(&rec);
        }
        timeline.records.push(rec);
    }

    let mut order: Vec<usize> = (0..n).collect();
    'steps: for step in 1..=planned {
        match &config.privacy {
            None => {
                // fixed-size shuffled batches; reshuffle at epoch boundaries
                let spe = config.steps_per_epoch(n);
                let in_epoch = ((step - 1) % spe) as usize;
                if in_epoch == 0 {
                    let epoch = (step - 1) / spe;
                    let mut rng = derive_rng(config.seed, &[0x50f1e, epoch]);
                    shuffle(&mut order, &mut rng);
                }
                let lo = in_epoch * config.batch_size;
                let hi = (lo + config.batch_size).min(n);
                let batch: Vec<usize> = order[lo..hi].to_vec();
                let labels: Vec<usize> = batch.iter().map(|&i| dataset.items[i].class_id).collect();
                let refs: Vec<&MultiScaleTokens> = batch.iter().map(|&i| &tokens[i]).collect();
                let mut rng = derive_rng(config.seed, &[0xd0b, step]);
                let lg = model.loss_graph(&labels, &refs, ForwardMode::Train, &mut rng)?;
                let ev = lg.graph.evaluate(&model.bindings())?;
                last_loss = ev.value(lg.mean_loss).item()?.as_f64();
                let grads = named_gradients(&model, &ev, lg.mean_loss)?;
                sgd.apply(&mut model, &grads)?;
            }
            Some(privacy) => {
                let ledger_ref = ledger.as_mut().expect("dp mode has a ledger");
                if let Some(target) = epsilon_target {
                    if ledger_ref.epsilon_after(1) > target + 1e-3 {
                        stop_reason = StopReason::PrivacyBudget;
                        break 'steps;
                    }
                }
                let mut lot_rng = derive_rng(config.seed, &[0x107, step]);
                let lot = poisson_sample(n, privacy.sample_rate, &mut lot_rng)?;
                if lot.is_empty() {
                    // the mechanism still ran; spend the step's privacy
                    ledger_ref.advance();
                    steps_run = step;
                    continue;
                }
                let results: Vec<Result<(f64, Vec<f64>)>> = lot
                    .par_iter()
                    .map(|&idx| {
                        let item = &dataset.items[idx];
                        let mut rng =
                            derive_rng(config.seed, &[0x9c4d, step, idx as u64]);
                        let grads = augmented_per_sample_grad(
                            &model,
                            &item.image,
                            item.class_id,
                            codebook,
                            privacy.k_aug,
                            config.augmentation.as_ref(),
                            ForwardMode::Train,
                            &mut rng,
                        )
                        .map_err(|e| {
                            crate::error::Error::Numeric(format!("sample {idx}: {e}"))
                        })?;
                        Ok((0.0, flatten_named(&grads)))
                    })
                    .collect();
                let mut per_sample = Vec::with_capacity(results.len());
                for r in results {
                    per_sample.push(r?.1);
                }
                let mut noise_rng = derive_rng(config.seed, &[0x4015e, step]);
                let update = privatize_step(
                    &per_sample,
                    privacy.clip_norm,
                    sigma,
                    per_sample.len(),
                    &mut noise_rng,
                )?;
                // shape the flat update like the trainable set
                let like: BTreeMap<String, Tensor<T>> = model
                    .trainable_names()
                    .iter()
                    .map(|name| (name.clone(), model.param(name).cloned().expect("trainable")))
                    .collect();
                let grads = unflatten_named(&update, &like)?;
                sgd.apply(&mut model, &grads)?;
                ledger_ref.advance();
                // loss on the lot for the timeline (post-update, no grad)
                if step % config.eval_every == 0 || step == planned {
                    let probe: Vec<usize> = lot.iter().copied().take(32).collect();
                    last_loss = probe_loss(&model, dataset, codebook, &probe, config.seed, step)?;
                }
            }
        }
        steps_run = step;

        if step % config.eval_every == 0 || step == planned {
            let eval = evaluate_model(&model, codebook, eval_split, protocol)?;
            let rec = MetricsRecord {
                step,
                train_loss: last_loss,
                fid: eval.fid,
                precision: eval.precision,
                recall: eval.recall,
                wall_time_s: start.elapsed().as_secs_f64(),
                cumulative_flops: step as f64 * per_step_flops,
                epsilon_spent: ledger.as_ref().map(|l| l.epsilon_spent()),
            };
            if let Some(cb) = on_record.as_mut() {
                cb(&rec);
            }
            timeline.push(rec);
        }
    }

    Ok(TrainOutcome {
        model,
        timeline,
        steps_run,
        stop_reason,
        ledger,
    })
}

/// Mean loss on a probe subset, evaluation mode (no dropout).
fn probe_loss<T: Real>(
    model: &AdaptedModel<T>,
    dataset: &Dataset,
    codebook: &Codebook,
    sample: &[usize],
    seed: u64,
    step: u64,
) -> Result<f64> {
    let labels: Vec<usize> = sample.iter().map(|&i| dataset.items[i].class_id).collect();
    let tokens: Vec<MultiScaleTokens> = sample
        .iter()
        .map(|&i| encode(&dataset.items[i].image, codebook, &model.config().patch_nums))
        .collect::<Result<_>>()?;
    let refs: Vec<&MultiScaleTokens> = tokens.iter().collect();
    let mut rng = derive_rng(seed, &[0x1055, step]);
    let lg = model.loss_graph(&labels, &refs, ForwardMode::Eval, &mut rng)?;
    let ev = lg.graph.evaluate(&model.bindings())?;
    Ok(ev.value(lg.mean_loss).item()?.as_f64())
}

fn shuffle<R: rand::Rng>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}
