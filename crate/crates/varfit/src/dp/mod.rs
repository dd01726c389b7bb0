//! Differentially private SGD machinery: Poisson subsampling, per-sample
//! clipping, Gaussian noising, augmentation multiplicity, and the privacy
//! ledger.
//!
//! The per-step mechanism adds noise to the *sum* of clipped per-sample
//! gradients and divides by the lot size (noise std `sigma * C / L` on the
//! mean), which is what the accountant's sensitivity analysis assumes.
//! Augmentation multiplicity averages the gradients of several views of one
//! example *before* clipping, so the unit of privacy stays the example and
//! the ledger never depends on the multiplicity.

pub mod accountant;

pub use accountant::{calibrate_sigma, epsilon_of};

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapters::AdaptedModel;
use crate::data::Image;
use crate::error::{contract, numeric, Result};
use crate::model::ForwardMode;
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{encode, Codebook};

/// DP-SGD configuration. Exactly one of `epsilon_target` / `sigma` is set;
/// the other is derived ([`PrivacySpec::resolve_sigma`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    /// Target privacy budget; `None` when `sigma` is given directly.
    pub epsilon_target: Option<f64>,
    /// Failure probability; `None` defaults to `1/N` at resolution time.
    pub delta: Option<f64>,
    /// Noise multiplier; `None` when calibrated from `epsilon_target`.
    pub sigma: Option<f64>,
    /// Per-sample gradient clipping norm `C`.
    pub clip_norm: f64,
    /// Poisson inclusion probability `q`.
    pub sample_rate: f64,
    /// Augmentation multiplicity (views per example).
    pub k_aug: usize,
}

impl PrivacySpec {
    pub fn with_epsilon(epsilon: f64, clip_norm: f64, sample_rate: f64, k_aug: usize) -> Self {
        Self {
            epsilon_target: Some(epsilon),
            delta: None,
            sigma: None,
            clip_norm,
            sample_rate,
            k_aug,
        }
    }

    pub fn with_sigma(sigma: f64, clip_norm: f64, sample_rate: f64, k_aug: usize) -> Self {
        Self {
            epsilon_target: None,
            delta: None,
            sigma: Some(sigma),
            clip_norm,
            sample_rate,
            k_aug,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.epsilon_target, self.sigma) {
            (Some(e), None) => {
                if e <= 0.0 {
                    return Err(contract("epsilon target must be positive"));
                }
            }
            (None, Some(s)) => {
                if s < 0.0 || !s.is_finite() {
                    return Err(contract("sigma must be finite and >= 0"));
                }
            }
            _ => {
                return Err(contract(
                    "exactly one of epsilon_target and sigma must be set",
                ))
            }
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                return Err(contract("delta must be in (0, 1)"));
            }
        }
        if self.clip_norm <= 0.0 {
            return Err(contract("clip norm must be positive"));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(contract("sample rate must be in (0, 1]"));
        }
        if self.k_aug < 1 {
            return Err(contract("augmentation multiplicity must be >= 1"));
        }
        Ok(())
    }

    /// Delta, defaulting to `1/N`.
    pub fn resolve_delta(&self, dataset_size: usize) -> f64 {
        self.delta.unwrap_or(1.0 / dataset_size as f64)
    }

    /// Noise multiplier, calibrating from the epsilon target over the
    /// planned step count when not given directly.
    pub fn resolve_sigma(&self, dataset_size: usize, planned_steps: u64) -> Result<f64> {
        self.validate()?;
        match (self.sigma, self.epsilon_target) {
            (Some(s), _) => Ok(s),
            (None, Some(e)) => calibrate_sigma(
                e,
                self.resolve_delta(dataset_size),
                self.sample_rate,
                planned_steps,
            ),
            _ => unreachable!("validated"),
        }
    }

    /// Expected lot size `floor(q * N)`.
    pub fn logical_lot_size(&self, dataset_size: usize) -> usize {
        (self.sample_rate * dataset_size as f64).floor() as usize
    }
}

/// Accumulated privacy spend. Epsilon is recomputed from
/// `(sigma, q, delta, steps)` after every step, so it is non-decreasing and
/// zero at step zero; it never depends on the augmentation multiplicity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacyLedger {
    sigma: f64,
    sample_rate: f64,
    delta: f64,
    steps: u64,
    epsilon_spent: f64,
    /// Cached single-step RDP per accounting order; composition over steps
    /// is linear, so advancing only redoes the cheap conversion.
    #[serde(skip)]
    rdp_step_cache: Vec<f64>,
}

impl PartialEq for PrivacyLedger {
    fn eq(&self, other: &Self) -> bool {
        self.sigma == other.sigma
            && self.sample_rate == other.sample_rate
            && self.delta == other.delta
            && self.steps == other.steps
            && self.epsilon_spent == other.epsilon_spent
    }
}

impl PrivacyLedger {
    pub fn new(sigma: f64, sample_rate: f64, delta: f64) -> Result<Self> {
        // epsilon_of validates the inputs
        epsilon_of(sigma, sample_rate, 0, delta)?;
        Ok(Self {
            sigma,
            sample_rate,
            delta,
            steps: 0,
            epsilon_spent: 0.0,
            rdp_step_cache: Vec::new(),
        })
    }

    /// Restores a ledger from checkpointed state.
    pub fn restore(sigma: f64, sample_rate: f64, delta: f64, steps: u64) -> Result<Self> {
        let epsilon_spent = epsilon_of(sigma, sample_rate, steps, delta)?;
        Ok(Self {
            sigma,
            sample_rate,
            delta,
            steps,
            epsilon_spent,
            rdp_step_cache: Vec::new(),
        })
    }

    fn epsilon_at(&mut self, steps: u64) -> f64 {
        if steps == 0 || self.sample_rate == 0.0 {
            return 0.0;
        }
        if self.sigma == 0.0 {
            return f64::INFINITY;
        }
        if self.rdp_step_cache.is_empty() {
            self.rdp_step_cache = accountant::default_orders()
                .iter()
                .map(|&a| accountant::rdp_step(self.sample_rate, self.sigma, a))
                .collect();
        }
        let orders = accountant::default_orders();
        let rdp: Vec<f64> = self
            .rdp_step_cache
            .iter()
            .map(|r| steps as f64 * r)
            .collect();
        accountant::eps_from_rdp(&orders, &rdp, self.delta)
    }

    /// Records one mechanism application.
    pub fn advance(&mut self) {
        self.steps += 1;
        self.epsilon_spent = self.epsilon_at(self.steps);
    }

    /// Epsilon after `extra` more steps, without committing them.
    pub fn epsilon_after(&mut self, extra: u64) -> f64 {
        self.epsilon_at(self.steps + extra)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn epsilon_spent(&self) -> f64 {
        self.epsilon_spent
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// Poisson subsampling: each index joins the lot independently with
/// probability `q`, so the lot size is Binomial(N, q).
pub fn poisson_sample<R: Rng>(dataset_size: usize, q: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(contract(format!("sample rate q={q} must be in [0, 1]")));
    }
    if q == 0.0 {
        return Ok(Vec::new());
    }
    if q == 1.0 {
        return Ok((0..dataset_size).collect());
    }
    Ok((0..dataset_size)
        .filter(|_| rng.gen::<f64>() < q)
        .collect())
}

/// `g / max(1, ||g||_2 / C)`: norm capped at `C`, direction preserved,
/// in-range gradients pass through unchanged.
pub fn clip_gradient(g: &[f64], clip_norm: f64) -> Result<Vec<f64>> {
    if clip_norm <= 0.0 {
        return Err(contract("clip norm must be positive"));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(numeric("non-finite per-sample gradient"));
    }
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = 1.0 / (norm / clip_norm).max(1.0);
    Ok(g.iter().map(|v| v * scale).collect())
}

/// One DP-SGD aggregation: clips each per-sample gradient, sums them in
/// index order, adds a single Gaussian draw of std `sigma * C` per
/// coordinate, and divides by the lot size.
pub fn privatize_step<R: Rng>(
    per_sample_grads: &[Vec<f64>],
    clip_norm: f64,
    sigma: f64,
    lot_size: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if per_sample_grads.is_empty() {
        return Err(contract("privatize_step requires a non-empty lot"));
    }
    if lot_size != per_sample_grads.len() {
        return Err(contract(format!(
            "lot size {lot_size} does not match {} per-sample gradients",
            per_sample_grads.len()
        )));
    }
    if sigma < 0.0 {
        return Err(contract("sigma must be >= 0"));
    }
    let dim = per_sample_grads[0].len();
    let mut sum = vec![0.0f64; dim];
    for (idx, g) in per_sample_grads.iter().enumerate() {
        if g.len() != dim {
            return Err(contract(format!(
                "per-sample gradient {idx} has length {}, expected {dim}",
                g.len()
            )));
        }
        let clipped =
            clip_gradient(g, clip_norm).map_err(|e| numeric(format!("sample {idx}: {e}")))?;
        for (s, v) in sum.iter_mut().zip(&clipped) {
            *s += v;
        }
    }
    if sigma > 0.0 {
        let std = sigma * clip_norm;
        for s in sum.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *s += std * z;
        }
    }
    let inv = 1.0 / lot_size as f64;
    for s in sum.iter_mut() {
        *s *= inv;
    }
    Ok(sum)
}

/// `f(d) + N(0, (sensitivity * sigma)^2)` per coordinate.
pub fn gaussian_mechanism<R: Rng>(
    value: &[f64],
    sensitivity: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if sensitivity < 0.0 || sigma < 0.0 {
        return Err(contract("sensitivity and sigma must be >= 0"));
    }
    let std = sensitivity * sigma;
    if std == 0.0 {
        return Ok(value.to_vec());
    }
    Ok(value
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            v + std * z
        })
        .collect())
}

/// Group-privacy degradation for `k` correlated records:
/// `(k eps, k e^{(k-1) eps} delta)`.
pub fn group_privacy(epsilon: f64, delta: f64, group_k: u32) -> Result<(f64, f64)> {
    if group_k < 1 {
        return Err(contract("group size must be >= 1"));
    }
    let k = group_k as f64;
    Ok((k * epsilon, k * ((k - 1.0) * epsilon).exp() * delta))
}

/// The model family's standard pre-processing transform: random resized
/// crop plus horizontal flip, seeded by the caller's stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    /// Smallest crop side as a fraction of the image side.
    pub min_crop: f64,
    pub hflip: bool,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            min_crop: 0.8,
            hflip: true,
        }
    }
}

impl Augmentation {
    pub fn identity() -> Self {
        Self {
            min_crop: 1.0,
            hflip: false,
        }
    }

    pub fn apply<R: Rng>(&self, image: &Image, rng: &mut R) -> Result<Image> {
        if !image.is_square() {
            return Err(contract("augmentation requires a square image"));
        }
        let size = image.width;
        let min_side = ((size as f64 * self.min_crop).round() as usize).clamp(1, size);
        let side = if min_side == size {
            size
        } else {
            rng.gen_range(min_side..=size)
        };
        let (x0, y0) = if side == size {
            (0, 0)
        } else {
            (
                rng.gen_range(0..=size - side),
                rng.gen_range(0..=size - side),
            )
        };
        let flip = self.hflip && rng.gen::<f64>() < 0.5;

        let mut out = Image::zeros(side, side, image.channels);
        for y in 0..side {
            for x in 0..side {
                let sx = if flip { x0 + side - 1 - x } else { x0 + x };
                for c in 0..image.channels {
                    out.set(x, y, c, image.at(sx, y0 + y, c));
                }
            }
        }
        if side == size {
            Ok(out)
        } else {
            out.resized(size)
        }
    }
}

/// Gradient of the mean loss over `k_aug` augmented views of one example,
/// computed before any clipping. The views share the example's label; the
/// result is keyed by trainable parameter name.
pub fn augmented_per_sample_grad<T: Real, R: Rng>(
    model: &AdaptedModel<T>,
    image: &Image,
    label: usize,
    codebook: &Codebook,
    k_aug: usize,
    augment: Option<&Augmentation>,
    mode: ForwardMode,
    rng: &mut R,
) -> Result<BTreeMap<String, Tensor<T>>> {
    if k_aug < 1 {
        return Err(contract("augmentation multiplicity must be >= 1"));
    }
    let patch_nums = model.config().patch_nums.clone();
    let mut tokens = Vec::with_capacity(k_aug);
    for _ in 0..k_aug {
        let view = match augment {
            Some(a) => a.apply(image, rng)?,
            None => image.clone(),
        };
        if view.width != image.width || view.height != image.height {
            return Err(contract(format!(
                "augmentation changed image shape to {}x{}",
                view.width, view.height
            )));
        }
        tokens.push(encode(&view, codebook, &patch_nums)?);
    }
    let refs: Vec<&_> = tokens.iter().collect();
    let labels = vec![label; k_aug];
    let lg = model.loss_graph(&labels, &refs, mode, rng)?;
    let ev = lg.graph.evaluate(&model.bindings())?;
    named_gradients(model, &ev, lg.mean_loss)
}

/// Gradients of every trainable parameter; parameters absent from the graph
/// (possible for narrow adapter targets) get exact zeros.
pub(crate) fn named_gradients<T: Real>(
    model: &AdaptedModel<T>,
    ev: &crate::tensor::Evaluation<'_, T>,
    loss: crate::tensor::NodeId,
) -> Result<BTreeMap<String, Tensor<T>>> {
    // one backward pass for every trainable parameter present in the graph
    let mut present = Vec::new();
    let mut absent = Vec::new();
    for name in model.trainable_names() {
        match ev.graph().input_id(name) {
            Some(id) => present.push((name.clone(), id)),
            None => absent.push(name.clone()),
        }
    }
    let ids: Vec<_> = present.iter().map(|(_, id)| *id).collect();
    let grads = ev.gradient(loss, &ids)?;
    let mut out: BTreeMap<String, Tensor<T>> = present
        .into_iter()
        .map(|(name, _)| name)
        .zip(grads)
        .collect();
    for name in absent {
        let zeros = Tensor::zeros(model.param(&name)?.shape());
        out.insert(name, zeros);
    }
    Ok(out)
}

/// Concatenates named gradients into one flat vector, in name order.
pub fn flatten_named<T: Real>(grads: &BTreeMap<String, Tensor<T>>) -> Vec<f64> {
    let mut out = Vec::new();
    for t in grads.values() {
        out.extend(t.data().iter().map(|v| v.as_f64()));
    }
    out
}

/// Splits a flat vector back into named tensors shaped like `like`.
pub fn unflatten_named<T: Real>(
    flat: &[f64],
    like: &BTreeMap<String, Tensor<T>>,
) -> Result<BTreeMap<String, Tensor<T>>> {
    let total: usize = like.values().map(|t| t.len()).sum();
    if flat.len() != total {
        return Err(contract(format!(
            "flat gradient length {} does not match parameter count {total}",
            flat.len()
        )));
    }
    let mut out = BTreeMap::new();
    let mut off = 0;
    for (name, t) in like {
        let chunk = &flat[off..off + t.len()];
        off += t.len();
        out.insert(name.clone(), Tensor::from_f64_slice(t.shape(), chunk)?);
    }
    Ok(out)
}
