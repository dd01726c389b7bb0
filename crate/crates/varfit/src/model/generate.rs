//! Scale-by-scale sampling.
//!
//! Generation walks the pyramid coarse to fine; at each scale every token of
//! that grid is sampled in one parallel step from the logits at that scale's
//! positions (the attention mask guarantees those logits never depend on
//! same-scale samples), then the grid is embedded through the next-scale
//! input path and the loop continues.

use rand::Rng;

use crate::adapters::AdaptedModel;
use crate::error::{contract, Result};
use crate::model::forward::{BuildCtx, ForwardMode, ModelView};
use crate::model::VarModel;
use crate::tensor::Real;
use crate::tokenizer::MultiScaleTokens;

/// Sampling controls. Temperature 0 means argmax; `top_k = None` keeps the
/// full vocabulary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOpts {
    pub temperature: f64,
    pub top_k: Option<usize>,
}

impl Default for SampleOpts {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
        }
    }
}

pub(crate) fn generate_impl<T: Real, R: Rng>(
    view: ModelView<'_, T>,
    labels: &[usize],
    opts: SampleOpts,
    rng: &mut R,
) -> Result<Vec<MultiScaleTokens>> {
    let cfg = view.model.config().clone();
    if labels.is_empty() {
        return Err(contract("empty label batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.num_classes) {
        return Err(contract(format!(
            "label {bad} out of range for {} classes",
            cfg.num_classes
        )));
    }
    if opts.temperature < 0.0 {
        return Err(contract("temperature must be >= 0"));
    }
    if opts.top_k == Some(0) {
        return Err(contract("top_k must be >= 1 when given"));
    }

    let b = labels.len();
    let pn = cfg.patch_nums.clone();
    let lvl = view.model.level_index();
    let mut grids: Vec<Vec<Vec<usize>>> = vec![Vec::with_capacity(pn.len()); b];

    for s in 0..pn.len() {
        // token sets holding the grids sampled so far (deeper grids empty)
        let partial: Vec<MultiScaleTokens> = grids
            .iter()
            .map(|g| {
                let mut filled = g.clone();
                for &p in pn.iter().skip(filled.len()) {
                    filled.push(vec![0; p * p]);
                }
                MultiScaleTokens::new(pn.clone(), filled).expect("well-formed partial grids")
            })
            .collect();
        let refs: Vec<&MultiScaleTokens> = partial.iter().collect();

        let mut ctx = BuildCtx::new(
            ModelView {
                model: view.model,
                adapter: view.adapter,
            },
            b,
            ForwardMode::Eval,
        );
        let teacher = ctx.teacher_from_tokens(&refs, s)?;
        let logits = ctx.transformer(labels, teacher)?;
        let bindings = ctx.view.bindings();
        let ev = ctx.g.evaluate(&bindings)?;
        let lv = ev.value(logits);

        let (start, len) = lvl.span_of_level(s);
        let vocab = cfg.vocab;
        for (example, grid_store) in grids.iter_mut().enumerate() {
            let mut grid = Vec::with_capacity(len);
            for pos in 0..len {
                let base = (example * cfg.seq_len() + start + pos) * vocab;
                let row: Vec<f64> = lv.data()[base..base + vocab]
                    .iter()
                    .map(|v| v.as_f64())
                    .collect();
                grid.push(sample_row(&row, opts, rng));
            }
            grid_store.push(grid);
        }
    }

    grids
        .into_iter()
        .map(|g| MultiScaleTokens::new(pn.clone(), g))
        .collect()
}

/// One categorical draw (or argmax at temperature 0) from a logit row.
fn sample_row<R: Rng>(logits: &[f64], opts: SampleOpts, rng: &mut R) -> usize {
    if opts.temperature == 0.0 {
        let mut best = 0usize;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let scaled: Vec<f64> = logits.iter().map(|&v| v / opts.temperature).collect();
    let keep: Vec<usize> = match opts.top_k {
        Some(k) if k < scaled.len() => {
            let mut idx: Vec<usize> = (0..scaled.len()).collect();
            idx.sort_by(|&a, &b| scaled[b].partial_cmp(&scaled[a]).unwrap().then(a.cmp(&b)));
            let mut kept = idx[..k].to_vec();
            kept.sort_unstable();
            kept
        }
        _ => (0..scaled.len()).collect(),
    };
    let max = keep.iter().map(|&i| scaled[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = keep.iter().map(|&i| (scaled[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (w, &i) in weights.iter().zip(&keep) {
        acc += w;
        if u < acc {
            return i;
        }
    }
    *keep.last().unwrap()
}

macro_rules! generate_api {
    ($ty:ident) => {
        impl<T: Real> $ty<T> {
            /// Samples token pyramids for a batch of class labels.
            pub fn generate_batch<R: Rng>(
                &self,
                labels: &[usize],
                opts: SampleOpts,
                rng: &mut R,
            ) -> Result<Vec<MultiScaleTokens>> {
                generate_impl(self.view(), labels, opts, rng)
            }

            /// Samples one token pyramid for a class label.
            pub fn generate<R: Rng>(
                &self,
                label: usize,
                opts: SampleOpts,
                rng: &mut R,
            ) -> Result<MultiScaleTokens> {
                Ok(self
                    .generate_batch(&[label], opts, rng)?
                    .pop()
                    .expect("batch of one"))
            }
        }
    };
}

generate_api!(VarModel);
generate_api!(AdaptedModel);

/// Free-function form of [`VarModel::generate`].
pub fn generate<T: Real, R: Rng>(
    model: &VarModel<T>,
    label: usize,
    opts: SampleOpts,
    rng: &mut R,
) -> Result<MultiScaleTokens> {
    model.generate(label, opts, rng)
}

/// Free-function form of [`VarModel::generate_batch`].
pub fn generate_batch<T: Real, R: Rng>(
    model: &VarModel<T>,
    labels: &[usize],
    opts: SampleOpts,
    rng: &mut R,
) -> Result<Vec<MultiScaleTokens>> {
    model.generate_batch(labels, opts, rng)
}
