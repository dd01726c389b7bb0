//! Analytic FLOP accounting for one training step and whole runs.
//!
//! Counting conventions (mirrored by the test oracles, all exact integer
//! arithmetic):
//!
//! - a linear map `m -> n` over `N` positions costs `2 N m n` forward
//!   (bias additions uncounted);
//! - attention score and value products are counted explicitly
//!   (`2 U L^2 w` each forward) and their backward is twice the forward,
//!   since both operands need gradients;
//! - softmax counts 4 FLOPs per element, layer norm 5, activations 1,
//!   each with backward equal to forward;
//! - every parameterized map pays one forward-sized activation-gradient
//!   pass in backward, plus one forward-sized weight-gradient pass when
//!   its parameters train (so frozen paths cost 1x, trained paths 2x);
//! - embedding lookups are free forward; their weight gradient counts one
//!   FLOP per touched element when the tables train;
//! - residual additions, bias additions and AdaLN modulations are
//!   uncounted second-order terms.
//!
//! Augmentation multiplicity multiplies every per-view quantity, so the
//! per-step gradient-bearing cost is exactly linear in `k_aug`.

use std::collections::BTreeMap;

use crate::adapters::{AdapterKind, AdapterSpec, AdapterTarget};
use crate::error::{contract, Result};
use crate::model::{VarConfig, ADALN_CHUNKS};

/// Cost of one training step (forward plus backward over the whole lot).
#[derive(Debug, Clone, PartialEq)]
pub struct StepCost {
    pub forward_flops: u128,
    pub backward_flops: u128,
    /// Portion of `backward_flops` spent on weight gradients; zero when
    /// nothing trains.
    pub weight_grad_flops: u128,
    pub per_step_total: u128,
    /// Per-component map: `embeddings`, `block.<i>`, `head`.
    pub breakdown: BTreeMap<String, u128>,
    pub batch: usize,
    pub k_aug: usize,
}

/// Whole-run cost. In DP mode the total uses the expected lot size `q N`
/// and is explicitly an expectation with coefficient of variation
/// `1 / sqrt(q N)`, never a measurement.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RunCost {
    pub steps: u64,
    pub total_pflops: f64,
    pub dp_mode: bool,
    pub coefficient_of_variation: Option<f64>,
    pub is_expectation: bool,
}

/// `2 N m n`: the forward cost convention for a linear map over N positions.
pub fn linear_flops(positions: u128, m: u128, n: u128) -> u128 {
    2 * positions * m * n
}

struct Acc {
    fwd: u128,
    bwd: u128,
    weight: u128,
}

impl Acc {
    fn new() -> Self {
        Self {
            fwd: 0,
            bwd: 0,
            weight: 0,
        }
    }

    fn linear(&mut self, positions: u128, m: u128, n: u128, trainable: bool) {
        let f = linear_flops(positions, m, n);
        self.fwd += f;
        self.bwd += f; // activation gradients
        if trainable {
            self.bwd += f;
            self.weight += f;
        }
    }

    fn lora(&mut self, positions: u128, d: u128, k: u128, r: u128) {
        // x -> A^T -> B^T, both trainable
        self.linear(positions, k, r, true);
        self.linear(positions, r, d, true);
    }

    fn elementwise(&mut self, elements: u128, c: u128) {
        self.fwd += c * elements;
        self.bwd += c * elements;
    }

    /// Activation-to-activation matmul (scores, attention-value): both
    /// operand gradients are needed, backward is twice forward.
    fn bilinear(&mut self, flops: u128) {
        self.fwd += flops;
        self.bwd += 2 * flops;
    }

    fn embedding_grad(&mut self, touched: u128, trainable: bool) {
        if trainable {
            self.bwd += touched;
            self.weight += touched;
        }
    }

    fn total(&self) -> u128 {
        self.fwd + self.bwd
    }
}

fn lora_target(spec: &AdapterSpec, target: AdapterTarget) -> Option<u128> {
    if spec.kind == AdapterKind::Lora && spec.targets.contains(&target) {
        Some(spec.rank as u128)
    } else {
        None
    }
}

/// Closed-form cost of one training step for `batch` examples with `k_aug`
/// views each.
pub fn step_flops(
    config: &VarConfig,
    adapter: &AdapterSpec,
    batch: usize,
    k_aug: usize,
) -> Result<StepCost> {
    config.validate()?;
    adapter.validate(config)?;
    if batch == 0 || k_aug == 0 {
        return Err(contract("batch and k_aug must be >= 1"));
    }
    let fft = adapter.kind == AdapterKind::Fft;
    let u = (batch * k_aug) as u128; // per-example views per step
    let l = config.seq_len() as u128;
    let nt = u * l; // token positions
    let w = config.width as u128;
    let heads = config.heads as u128;
    let v = config.vocab as u128;
    let mlp = config.mlp_dim() as u128;
    let ada_out = (ADALN_CHUNKS * config.width) as u128;

    let mut breakdown = BTreeMap::new();
    let mut total_acc = Acc::new();

    // embeddings: lookups are free forward; tables train only under FFT
    {
        let mut acc = Acc::new();
        acc.embedding_grad(nt * w, fft); // token embeddings via teacher path
        acc.embedding_grad(nt * w, fft); // positional
        acc.embedding_grad(nt * w, fft); // level
        acc.embedding_grad(u * w, fft); // class
        breakdown.insert("embeddings".to_string(), acc.total());
        merge(&mut total_acc, acc);
    }

    for layer in 0..config.depth {
        let mut acc = Acc::new();
        // qkv projection
        acc.linear(nt, w, 3 * w, fft);
        if let Some(r) = lora_target(adapter, AdapterTarget::AttentionQkv) {
            acc.lora(nt, 3 * w, w, r);
        }
        // attention scores + softmax + value product
        acc.bilinear(2 * u * l * l * w);
        acc.elementwise(u * heads * l * l, 4);
        acc.bilinear(2 * u * l * l * w);
        // output projection
        acc.linear(nt, w, w, fft);
        if let Some(r) = lora_target(adapter, AdapterTarget::AttentionProj) {
            acc.lora(nt, w, w, r);
        }
        // two layer norms
        acc.elementwise(nt * w, 5);
        acc.elementwise(nt * w, 5);
        // AdaLN conditioning (per example, not per token); trainable under
        // FFT and LNTuning
        acc.elementwise(u * w, 1); // silu
        acc.linear(u, w, ada_out, fft || adapter.kind == AdapterKind::LnTuning);
        if let Some(r) = lora_target(adapter, AdapterTarget::AdaLn) {
            acc.lora(u, ada_out, w, r);
        }
        // MLP
        acc.linear(nt, w, mlp, fft);
        acc.elementwise(nt * mlp, 1); // activation
        acc.linear(nt, mlp, w, fft);
        if let Some(r) = lora_target(adapter, AdapterTarget::Mlp) {
            acc.lora(nt, mlp, w, r);
            acc.lora(nt, w, mlp, r);
        }
        breakdown.insert(format!("block.{layer}"), acc.total());
        merge(&mut total_acc, acc);
    }

    // head: final norm, head AdaLN, output projection (base-only, so
    // trainable under FFT alone)
    {
        let mut acc = Acc::new();
        acc.elementwise(nt * w, 5);
        acc.elementwise(u * w, 1); // silu on the condition
        acc.linear(u, w, 2 * w, fft);
        acc.linear(nt, w, v, fft);
        breakdown.insert("head".to_string(), acc.total());
        merge(&mut total_acc, acc);
    }

    Ok(StepCost {
        forward_flops: total_acc.fwd,
        backward_flops: total_acc.bwd,
        weight_grad_flops: total_acc.weight,
        per_step_total: total_acc.total(),
        breakdown,
        batch,
        k_aug,
    })
}

fn merge(total: &mut Acc, part: Acc) {
    total.fwd += part.fwd;
    total.bwd += part.bwd;
    total.weight += part.weight;
}

/// DP sampling parameters for expected-cost reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpSampling {
    pub q: f64,
    pub n: usize,
}

/// Total run cost. Without `dp`, the exact product `steps * per_step`.
/// With `dp`, the per-example step cost (derived exactly from the given
/// step cost) is scaled by the expected lot size `q N`; the result carries
/// `coefficient_of_variation = 1 / sqrt(q N)` and is flagged as an
/// expectation.
pub fn total_cost(step: &StepCost, steps: u64, dp: Option<DpSampling>) -> Result<RunCost> {
    match dp {
        None => Ok(RunCost {
            steps,
            total_pflops: steps as f64 * step.per_step_total as f64 / 1e15,
            dp_mode: false,
            coefficient_of_variation: None,
            is_expectation: false,
        }),
        Some(DpSampling { q, n }) => {
            if !(q > 0.0 && q <= 1.0) || n == 0 {
                return Err(contract("dp sampling requires q in (0,1] and n >= 1"));
            }
            // every term carries the batch factor linearly
            debug_assert_eq!(step.per_step_total % step.batch as u128, 0);
            let per_example = (step.per_step_total / step.batch as u128) as f64;
            let expected_lot = q * n as f64;
            Ok(RunCost {
                steps,
                total_pflops: steps as f64 * expected_lot * per_example / 1e15,
                dp_mode: true,
                coefficient_of_variation: Some(1.0 / expected_lot.sqrt()),
                is_expectation: true,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterSpec;

    #[test]
    fn linear_convention_small_case() {
        // single linear layer, b = 2, L = 1, 3 -> 5: forward = 60
        assert_eq!(linear_flops(2, 3, 5), 60);
    }

    #[test]
    fn frozen_linear_has_zero_weight_gradient_cost() {
        let mut acc = Acc::new();
        acc.linear(10, 4, 4, false);
        assert_eq!(acc.weight, 0);
        assert_eq!(acc.bwd, acc.fwd);
        let mut trained = Acc::new();
        trained.linear(10, 4, 4, true);
        assert_eq!(trained.weight, trained.fwd);
        assert_eq!(trained.bwd, 2 * trained.fwd);
    }

    #[test]
    fn k_aug_scales_step_cost_exactly_linearly() {
        let cfg = VarConfig::toy();
        for spec in [
            AdapterSpec::fft(),
            AdapterSpec::lora_default(),
            AdapterSpec::ln_tuning(),
        ] {
            let one = step_flops(&cfg, &spec, 4, 1).unwrap();
            let eight = step_flops(&cfg, &spec, 4, 8).unwrap();
            assert_eq!(eight.per_step_total, 8 * one.per_step_total);
            assert_eq!(eight.forward_flops, 8 * one.forward_flops);
            assert_eq!(eight.backward_flops, 8 * one.backward_flops);
        }
    }

    #[test]
    fn peft_ordering_on_parity_configs() {
        for depth in [4usize, 8, 12] {
            let cfg = VarConfig::full_scale(depth);
            let fft = step_flops(&cfg, &AdapterSpec::fft(), 2, 1).unwrap();
            let lora = step_flops(&cfg, &AdapterSpec::lora_default(), 2, 1).unwrap();
            let lnt = step_flops(&cfg, &AdapterSpec::ln_tuning(), 2, 1).unwrap();
            assert!(
                lnt.per_step_total <= lora.per_step_total,
                "depth {depth}: lnt {} > lora {}",
                lnt.per_step_total,
                lora.per_step_total
            );
            assert!(
                lora.per_step_total <= fft.per_step_total,
                "depth {depth}: lora {} > fft {}",
                lora.per_step_total,
                fft.per_step_total
            );
        }
    }

    #[test]
    fn cost_monotone_in_depth() {
        let mut prev = 0u128;
        for depth in [2usize, 4, 6, 8] {
            let cfg = VarConfig {
                depth,
                ..VarConfig::full_scale(4)
            };
            let c = step_flops(&cfg, &AdapterSpec::fft(), 1, 1).unwrap();
            assert!(c.per_step_total > prev);
            prev = c.per_step_total;
        }
    }

    #[test]
    fn ln_tuning_weight_cost_covers_only_the_conditioning_maps() {
        let cfg = VarConfig::toy();
        let lnt = step_flops(&cfg, &AdapterSpec::ln_tuning(), 3, 1).unwrap();
        let u = 3u128;
        let w = cfg.width as u128;
        let expect: u128 = (cfg.depth as u128) * linear_flops(u, w, 6 * w);
        assert_eq!(lnt.weight_grad_flops, expect);
    }

    #[test]
    fn run_cost_edge_cases() {
        let cfg = VarConfig::toy();
        let step = step_flops(&cfg, &AdapterSpec::fft(), 2, 1).unwrap();
        let zero = total_cost(&step, 0, None).unwrap();
        assert_eq!(zero.total_pflops, 0.0);

        // unit arithmetic: 1e6 steps of 1e9 flops = 1 PFLOP
        let fake = StepCost {
            forward_flops: 500_000_000,
            backward_flops: 500_000_000,
            weight_grad_flops: 0,
            per_step_total: 1_000_000_000,
            breakdown: BTreeMap::new(),
            batch: 1,
            k_aug: 1,
        };
        let run = total_cost(&fake, 1_000_000, None).unwrap();
        assert!((run.total_pflops - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dp_run_cost_is_flagged_expectation_with_cv() {
        let cfg = VarConfig::toy();
        let step = step_flops(&cfg, &AdapterSpec::lora_default(), 1, 4).unwrap();
        let run = total_cost(&step, 100, Some(DpSampling { q: 0.251, n: 1020 })).unwrap();
        assert!(run.dp_mode && run.is_expectation);
        let cv = run.coefficient_of_variation.unwrap();
        assert!((cv - 1.0 / (0.251f64 * 1020.0).sqrt()).abs() < 1e-12);
        assert!((cv - 0.0625).abs() < 2e-4);
    }

    #[test]
    fn breakdown_sums_to_total() {
        let cfg = VarConfig::toy();
        for spec in [
            AdapterSpec::fft(),
            AdapterSpec::lora_default(),
            AdapterSpec::ln_tuning(),
        ] {
            let c = step_flops(&cfg, &spec, 2, 2).unwrap();
            let sum: u128 = c.breakdown.values().sum();
            assert_eq!(sum, c.per_step_total);
            assert_eq!(c.per_step_total, c.forward_flops + c.backward_flops);
        }
    }
}
