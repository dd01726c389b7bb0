//! Next-scale prediction transformer.
//!
//! A class-conditioned decoder over multi-scale token grids: token, class,
//! positional and level embeddings feed a stack of AdaLN-conditioned blocks
//! whose attention is masked so a position can attend only to the same or
//! earlier pyramid levels. The level index, the attention mask and the zero
//! key bias are derived values recomputed from the configuration on demand,
//! never stored as independent state.

mod forward;
mod generate;

pub use forward::{ar_loss, ar_loss_per_example, pack_concat, unpack_concat, ForwardMode, LossGraph, LN_EPS};
pub use generate::{generate, generate_batch, SampleOpts};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rng::derive_rng;
use crate::tensor::{Real, Tensor};
use crate::tokenizer::check_patch_nums;

/// Hidden dim of the MLP relative to the embedding width.
pub const MLP_RATIO: usize = 4;
/// AdaLN conditioning produces scale/shift/gate for both branches.
pub const ADALN_CHUNKS: usize = 6;
/// Patch side lengths of the released 256px model family.
pub const FULL_SCALE_PATCH_NUMS: [usize; 10] = [1, 2, 3, 4, 5, 6, 8, 10, 13, 16];

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarConfig {
    /// Ascending per-scale grid side lengths.
    pub patch_nums: Vec<usize>,
    /// Transformer block count.
    pub depth: usize,
    /// Embedding width.
    pub width: usize,
    /// Attention head count; must divide `width`.
    pub heads: usize,
    pub num_classes: usize,
    /// Codebook size the output head predicts over.
    pub vocab: usize,
    /// Probability of replacing the class embedding by the unconditional
    /// row during training.
    pub cond_drop_prob: f64,
}

impl VarConfig {
    /// Desk-scale default: 21-token pyramid, two blocks of width 32.
    pub fn toy() -> Self {
        Self {
            patch_nums: vec![1, 2, 4],
            depth: 2,
            width: 32,
            heads: 2,
            num_classes: 4,
            vocab: 64,
            cond_drop_prob: 0.1,
        }
    }

    /// Depth-indexed family convention: `width = 64 * depth`,
    /// `heads = depth`, 4096-entry vocabulary, 1000 classes.
    pub fn full_scale(depth: usize) -> Self {
        Self {
            patch_nums: FULL_SCALE_PATCH_NUMS.to_vec(),
            depth,
            width: 64 * depth,
            heads: depth,
            num_classes: 1000,
            vocab: 4096,
            cond_drop_prob: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_patch_nums(&self.patch_nums)?;
        if self.width == 0 || self.heads == 0 {
            return Err(contract("width and heads must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(contract(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.num_classes == 0 || self.vocab < 2 {
            return Err(contract("num_classes >= 1 and vocab >= 2 required"));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(contract("cond_drop_prob must be in [0, 1]"));
        }
        Ok(())
    }

    /// Total sequence length `sum(p^2)`.
    pub fn seq_len(&self) -> usize {
        self.patch_nums.iter().map(|p| p * p).sum()
    }

    pub fn num_scales(&self) -> usize {
        self.patch_nums.len()
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        MLP_RATIO * self.width
    }

    /// Name and shape of every parameter, in map order. The fixed zero key
    /// bias is not a parameter and does not appear here.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let w = self.width;
        let l = self.seq_len();
        let mut m = BTreeMap::new();
        m.insert("tok_emb".into(), vec![self.vocab, w]);
        m.insert("class_emb".into(), vec![self.num_classes + 1, w]);
        m.insert("pos_emb".into(), vec![l, w]);
        m.insert("lvl_emb".into(), vec![self.num_scales(), w]);
        for i in 0..self.depth {
            m.insert(format!("blocks.{i}.qkv_w"), vec![3 * w, w]);
            m.insert(format!("blocks.{i}.q_bias"), vec![w]);
            m.insert(format!("blocks.{i}.v_bias"), vec![w]);
            m.insert(format!("blocks.{i}.proj_w"), vec![w, w]);
            m.insert(format!("blocks.{i}.proj_b"), vec![w]);
            m.insert(format!("blocks.{i}.fc1_w"), vec![self.mlp_dim(), w]);
            m.insert(format!("blocks.{i}.fc1_b"), vec![self.mlp_dim()]);
            m.insert(format!("blocks.{i}.fc2_w"), vec![w, self.mlp_dim()]);
            m.insert(format!("blocks.{i}.fc2_b"), vec![w]);
            m.insert(format!("blocks.{i}.ada_w"), vec![ADALN_CHUNKS * w, w]);
            m.insert(format!("blocks.{i}.ada_b"), vec![ADALN_CHUNKS * w]);
        }
        m.insert("head_ada_w".into(), vec![2 * w, w]);
        m.insert("head_ada_b".into(), vec![2 * w]);
        m.insert("head_w".into(), vec![self.vocab, w]);
        m.insert("head_b".into(), vec![self.vocab]);
        m
    }

    pub fn total_params(&self) -> u64 {
        self.param_shapes()
            .values()
            .map(|s| s.iter().product::<usize>() as u64)
            .sum()
    }
}

/// Pyramid level of every sequence position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelIndex {
    values: Vec<usize>,
}

impl LevelIndex {
    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn level_of(&self, pos: usize) -> usize {
        self.values[pos]
    }

    /// Start offset and length of the position block of `level`.
    pub fn span_of_level(&self, level: usize) -> (usize, usize) {
        let start = self.values.iter().take_while(|&&v| v < level).count();
        let len = self.values.iter().filter(|&&v| v == level).count();
        (start, len)
    }
}

/// Position-to-level map: level `s` occupies `p_s^2` consecutive positions.
pub fn level_index(patch_nums: &[usize]) -> Result<LevelIndex> {
    check_patch_nums(patch_nums)?;
    let mut values = Vec::with_capacity(patch_nums.iter().map(|p| p * p).sum());
    for (s, &p) in patch_nums.iter().enumerate() {
        values.extend(std::iter::repeat(s).take(p * p));
    }
    Ok(LevelIndex { values })
}

/// Additive attention mask: `mask[i][j] = 0` iff `level(i) >= level(j)`,
/// `-inf` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBias {
    len: usize,
    mask: Vec<f64>,
}

impl AttentionBias {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.mask[i * self.len + j]
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.at(i, j) == 0.0
    }

    /// Mask as an `L x L` tensor with `-inf` realized as the most negative
    /// finite value of the target precision.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_raw(
            vec![self.len, self.len],
            self.mask
                .iter()
                .map(|&v| if v == 0.0 { T::zero() } else { T::most_negative() })
                .collect(),
        )
    }
}

/// Recomputes the pyramid attention mask from `patch_nums`.
pub fn attention_bias(patch_nums: &[usize]) -> Result<AttentionBias> {
    let lvl = level_index(patch_nums)?;
    let l = lvl.len();
    let mut mask = vec![0.0f64; l * l];
    for i in 0..l {
        for j in 0..l {
            if lvl.level_of(i) < lvl.level_of(j) {
                mask[i * l + j] = f64::NEG_INFINITY;
            }
        }
    }
    Ok(AttentionBias { len: l, mask })
}

/// The transformer parameters plus configuration.
#[derive(Debug, Clone)]
pub struct VarModel<T: Real> {
    config: VarConfig,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> VarModel<T> {
    /// Default initialization: embeddings and weight matrices from a seeded
    /// Gaussian, biases zero, AdaLN conditioning maps zero so blocks start
    /// as identity.
    pub fn init(config: VarConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(seed, &[0x0de1]);
        let mut params = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let is_zero = name.ends_with("_b")
                || name.ends_with("_bias")
                || name.contains("ada_w")
                || name.contains("head_ada");
            let std = if name == "pos_emb" || name == "lvl_emb" {
                0.01
            } else {
                0.02
            };
            let t = if is_zero {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, std, &mut rng)
            };
            params.insert(name, t.with_grad());
        }
        Ok(Self { config, params })
    }

    /// Every parameter from a seeded Gaussian; used where degenerate zero
    /// initializations would make a check vacuous.
    pub fn random_init(config: VarConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(seed, &[0x0de2]);
        let mut params = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            params.insert(name, Tensor::randn(&shape, std, &mut rng).with_grad());
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model from explicit parameter tensors (checkpoint restore,
    /// merges). Shapes must match the registry exactly.
    pub fn from_params(config: VarConfig, params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expect = config.param_shapes();
        if params.len() != expect.len() {
            return Err(contract(format!(
                "expected {} parameters, got {}",
                expect.len(),
                params.len()
            )));
        }
        for (name, shape) in &expect {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(contract(format!(
                        "parameter '{name}' has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )))
                }
                None => return Err(contract(format!("missing parameter '{name}'"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &VarConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| contract(format!("unknown parameter '{name}'")))
    }

    pub(crate) fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| contract(format!("unknown parameter '{name}'")))?;
        if slot.shape() != value.shape() {
            return Err(contract(format!(
                "parameter '{name}' shape {:?} cannot take value of shape {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value.with_grad();
        Ok(())
    }

    /// Fixed zero bias for the key projection; recomputed, never stored,
    /// and never part of any trainable set.
    pub fn zero_k_bias(&self) -> Tensor<T> {
        Tensor::zeros(&[self.config.width])
    }

    pub fn level_index(&self) -> LevelIndex {
        level_index(&self.config.patch_nums).expect("validated config")
    }

    pub fn attention_bias(&self) -> AttentionBias {
        attention_bias(&self.config.patch_nums).expect("validated config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_index_smallest_cases() {
        assert_eq!(level_index(&[1]).unwrap().values(), &[0]);
        assert_eq!(level_index(&[1, 2]).unwrap().values(), &[0, 1, 1, 1, 1]);
    }

    #[test]
    fn level_index_direct_evaluation() {
        let lvl = level_index(&[1, 2, 4]).unwrap();
        assert_eq!(lvl.len(), 21);
        let mut expect = vec![0];
        expect.extend(vec![1; 4]);
        expect.extend(vec![2; 16]);
        assert_eq!(lvl.values(), expect.as_slice());
        assert_eq!(lvl.span_of_level(1), (1, 4));
        assert_eq!(lvl.span_of_level(2), (5, 16));
    }

    #[test]
    fn attention_bias_single_scale() {
        let b = attention_bias(&[1]).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.at(0, 0), 0.0);
    }

    #[test]
    fn attention_bias_two_scales() {
        let b = attention_bias(&[1, 2]).unwrap();
        // row 0 attends only to itself
        assert_eq!(b.at(0, 0), 0.0);
        for j in 1..5 {
            assert_eq!(b.at(0, j), f64::NEG_INFINITY);
        }
        // rows 1..4 attend everywhere
        for i in 1..5 {
            for j in 0..5 {
                assert_eq!(b.at(i, j), 0.0);
            }
        }
    }

    #[test]
    fn attention_bias_matches_level_rule_bruteforce() {
        for pn in [vec![1, 2], vec![1, 2, 3], vec![1, 2, 4], vec![2, 3, 5, 7]] {
            let b = attention_bias(&pn).unwrap();
            let lvl = level_index(&pn).unwrap();
            for i in 0..lvl.len() {
                for j in 0..lvl.len() {
                    let expect = lvl.level_of(i) >= lvl.level_of(j);
                    assert_eq!(b.allows(i, j), expect, "pn {pn:?} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn derived_values_are_pure() {
        let a = attention_bias(&[1, 2, 4]).unwrap();
        let b = attention_bias(&[1, 2, 4]).unwrap();
        assert_eq!(a, b);
        assert_eq!(level_index(&[1, 3]).unwrap(), level_index(&[1, 3]).unwrap());
    }

    #[test]
    fn config_validation() {
        let mut c = VarConfig::toy();
        c.validate().unwrap();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = VarConfig::toy();
        c.patch_nums = vec![2, 1];
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_scale_parameter_totals() {
        let d16 = VarConfig::full_scale(16);
        assert_eq!(d16.width, 1024);
        assert_eq!(d16.seq_len(), 680);
        let total = d16.total_params();
        assert!(total > 294_000_000 && total < 326_000_000, "{total}");
    }

    #[test]
    fn init_is_deterministic_and_registry_complete() {
        let m1 = VarModel::<f32>::init(VarConfig::toy(), 3).unwrap();
        let m2 = VarModel::<f32>::init(VarConfig::toy(), 3).unwrap();
        for (name, t) in m1.params() {
            assert_eq!(t, &m2.params()[name]);
            assert!(t.requires_grad());
        }
        assert_eq!(
            m1.params().len(),
            VarConfig::toy().param_shapes().len()
        );
    }

    #[test]
    fn zero_k_bias_is_zero_and_not_a_param() {
        let m = VarModel::<f64>::init(VarConfig::toy(), 0).unwrap();
        assert_eq!(m.zero_k_bias(), Tensor::zeros(&[32]));
        assert!(m.param("zero_k_bias").is_err());
    }
}
