//! Adaptation strategies: full fine-tuning, LoRA, and LayerNorm tuning.
//!
//! An [`AdapterSpec`] selects what trains; [`apply_adapter`] pairs it with a
//! frozen base model. LoRA adds zero-initialized low-rank pairs on targeted
//! weight matrices (the fused qkv matrix is targeted as a whole). LNTuning
//! adds trainable copies of the AdaLN conditioning parameters and routes the
//! forward pass through them, leaving the originals frozen; parameter
//! fractions therefore count base plus added adapter parameters.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{VarConfig, VarModel, ADALN_CHUNKS};
use crate::rng::derive_rng;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Fft,
    Lora,
    LnTuning,
}

/// Weight groups an adapter may attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterTarget {
    AttentionQkv,
    AttentionProj,
    Mlp,
    AdaLn,
}

impl AdapterTarget {
    pub const ALL: [AdapterTarget; 4] = [
        AdapterTarget::AttentionQkv,
        AdapterTarget::AttentionProj,
        AdapterTarget::Mlp,
        AdapterTarget::AdaLn,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "attention_qkv" => Ok(Self::AttentionQkv),
            "attention_proj" => Ok(Self::AttentionProj),
            "mlp" => Ok(Self::Mlp),
            "adaln" => Ok(Self::AdaLn),
            other => Err(contract(format!("unknown adapter target '{other}'"))),
        }
    }

    /// Targeted weight-matrix parameter names inside block `i`.
    pub(crate) fn matrix_names(&self, layer: usize) -> Vec<String> {
        match self {
            AdapterTarget::AttentionQkv => vec![format!("blocks.{layer}.qkv_w")],
            AdapterTarget::AttentionProj => vec![format!("blocks.{layer}.proj_w")],
            AdapterTarget::Mlp => vec![
                format!("blocks.{layer}.fc1_w"),
                format!("blocks.{layer}.fc2_w"),
            ],
            AdapterTarget::AdaLn => vec![format!("blocks.{layer}.ada_w")],
        }
    }
}

/// Which parameters train, and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    /// LoRA rank; ignored by FFT and LNTuning.
    pub rank: usize,
    /// LoRA scale numerator; effective scale is `alpha / rank`.
    pub alpha: f64,
    /// LoRA dropout probability on the low-rank branch input.
    pub dropout: f64,
    pub targets: BTreeSet<AdapterTarget>,
}

impl AdapterSpec {
    pub fn fft() -> Self {
        Self {
            kind: AdapterKind::Fft,
            rank: 0,
            alpha: 0.0,
            dropout: 0.0,
            targets: BTreeSet::new(),
        }
    }

    pub fn lora(rank: usize, alpha: f64, dropout: f64, targets: &[AdapterTarget]) -> Self {
        Self {
            kind: AdapterKind::Lora,
            rank,
            alpha,
            dropout,
            targets: targets.iter().copied().collect(),
        }
    }

    /// Rank-16 LoRA with `alpha = 2r`, no dropout, on attention qkv and
    /// projection, both MLP matrices, and the AdaLN conditioning map.
    pub fn lora_default() -> Self {
        Self::lora(16, 32.0, 0.0, &AdapterTarget::ALL)
    }

    pub fn ln_tuning() -> Self {
        Self {
            kind: AdapterKind::LnTuning,
            rank: 0,
            alpha: 0.0,
            dropout: 0.0,
            targets: [AdapterTarget::AdaLn].into_iter().collect(),
        }
    }

    /// Placement-ablation presets.
    pub fn ablation_variant(name: &str) -> Result<Self> {
        match name {
            "LoRA-A" => Ok(Self::lora(
                16,
                32.0,
                0.0,
                &[AdapterTarget::AttentionQkv, AdapterTarget::AttentionProj],
            )),
            "LoRA-M" => Ok(Self::lora(16, 32.0, 0.0, &[AdapterTarget::Mlp])),
            "LoRA-AM+LN" => Ok(Self::lora_default()),
            "LNTuning" => Ok(Self::ln_tuning()),
            other => Err(contract(format!("unknown ablation variant '{other}'"))),
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, config: &VarConfig) -> Result<()> {
        match self.kind {
            AdapterKind::Fft => Ok(()),
            AdapterKind::LnTuning => {
                let expect: BTreeSet<_> = [AdapterTarget::AdaLn].into_iter().collect();
                if self.targets != expect {
                    return Err(contract("LNTuning targets exactly {adaln}"));
                }
                Ok(())
            }
            AdapterKind::Lora => {
                if self.rank < 1 {
                    return Err(contract("LoRA rank must be >= 1"));
                }
                if self.alpha <= 0.0 {
                    return Err(contract("LoRA alpha must be positive"));
                }
                if !(0.0..1.0).contains(&self.dropout) {
                    return Err(contract("LoRA dropout must be in [0, 1)"));
                }
                if self.targets.is_empty() {
                    return Err(contract("LoRA requires at least one target"));
                }
                let shapes = config.param_shapes();
                for target in &self.targets {
                    for name in target.matrix_names(0) {
                        let s = &shapes[&name];
                        let min_dim = s[0].min(s[1]);
                        if self.rank >= min_dim {
                            return Err(contract(format!(
                                "LoRA rank {} must be < min dim {} of '{name}'",
                                self.rank, min_dim
                            )));
                        }
                    }
                }
                Ok(())
            }
        }
    }

    /// Names and shapes of the parameters this adapter adds.
    pub fn adapter_shapes(&self, config: &VarConfig) -> BTreeMap<String, Vec<usize>> {
        let mut m = BTreeMap::new();
        match self.kind {
            AdapterKind::Fft => {}
            AdapterKind::Lora => {
                let shapes = config.param_shapes();
                for layer in 0..config.depth {
                    for target in &self.targets {
                        for name in target.matrix_names(layer) {
                            let s = &shapes[&name];
                            let (d, k) = (s[0], s[1]);
                            m.insert(format!("adapter.{name}.lora_a"), vec![self.rank, k]);
                            m.insert(format!("adapter.{name}.lora_b"), vec![d, self.rank]);
                        }
                    }
                }
            }
            AdapterKind::LnTuning => {
                let w = config.width;
                for layer in 0..config.depth {
                    m.insert(
                        format!("adapter.blocks.{layer}.ada_w"),
                        vec![ADALN_CHUNKS * w, w],
                    );
                    m.insert(format!("adapter.blocks.{layer}.ada_b"), vec![ADALN_CHUNKS * w]);
                }
            }
        }
        m
    }

    /// LoRA pair names for a base matrix, when that matrix is targeted.
    pub(crate) fn lora_pair_for(&self, base_name: &str) -> Option<(String, String)> {
        if self.kind != AdapterKind::Lora {
            return None;
        }
        let targeted = self
            .targets
            .iter()
            .any(|t| t.matrix_names_match(base_name));
        if targeted {
            Some((
                format!("adapter.{base_name}.lora_a"),
                format!("adapter.{base_name}.lora_b"),
            ))
        } else {
            None
        }
    }
}

impl AdapterTarget {
    fn matrix_names_match(&self, base_name: &str) -> bool {
        let suffix = |s: &str| base_name.starts_with("blocks.") && base_name.ends_with(s);
        match self {
            AdapterTarget::AttentionQkv => suffix(".qkv_w"),
            AdapterTarget::AttentionProj => suffix(".proj_w"),
            AdapterTarget::Mlp => suffix(".fc1_w") || suffix(".fc2_w"),
            AdapterTarget::AdaLn => suffix(".ada_w"),
        }
    }
}

/// Trainable / total parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: u64,
    /// Base plus adapter parameters (the fixed zero key bias is not a
    /// parameter and is excluded).
    pub total: u64,
    pub fraction: f64,
}

/// Parameter accounting from shapes alone, without allocating a model.
pub fn count_for_config(config: &VarConfig, spec: &AdapterSpec) -> Result<ParamCount> {
    config.validate()?;
    spec.validate(config)?;
    let base: u64 = config.total_params();
    let added: u64 = spec
        .adapter_shapes(config)
        .values()
        .map(|s| s.iter().product::<usize>() as u64)
        .sum();
    let trainable = match spec.kind {
        AdapterKind::Fft => base,
        AdapterKind::Lora | AdapterKind::LnTuning => added,
    };
    let total = base + added;
    Ok(ParamCount {
        trainable,
        total,
        fraction: trainable as f64 / total as f64,
    })
}

/// A frozen base model plus adapter state and the explicit trainable set.
#[derive(Debug, Clone)]
pub struct AdaptedModel<T: Real> {
    base: VarModel<T>,
    spec: AdapterSpec,
    adapter: BTreeMap<String, Tensor<T>>,
    trainable: Vec<String>,
}

/// Wraps `model` according to `spec`. LoRA pairs start at `B = 0`,
/// `A ~ N(0, 0.01)`, so the adapted forward initially equals the base
/// forward; LNTuning copies start equal to the base AdaLN parameters.
pub fn apply_adapter<T: Real>(
    model: VarModel<T>,
    spec: AdapterSpec,
    seed: u64,
) -> Result<AdaptedModel<T>> {
    spec.validate(model.config())?;
    let mut rng = derive_rng(seed, &[0xada]);
    let mut adapter = BTreeMap::new();
    for (name, shape) in spec.adapter_shapes(model.config()) {
        let t = if name.ends_with(".lora_b") {
            Tensor::zeros(&shape)
        } else if name.ends_with(".lora_a") {
            Tensor::randn(&shape, 0.01, &mut rng)
        } else {
            // LNTuning trainable copy of the base parameter
            let base_name = name.strip_prefix("adapter.").expect("adapter prefix");
            model.param(base_name)?.clone()
        };
        adapter.insert(name, t.with_grad());
    }
    let trainable = match spec.kind {
        AdapterKind::Fft => model.params().keys().cloned().collect(),
        _ => adapter.keys().cloned().collect(),
    };
    Ok(AdaptedModel {
        base: model,
        spec,
        adapter,
        trainable,
    })
}

impl<T: Real> AdaptedModel<T> {
    /// Reassembles an adapted model from a frozen base plus explicit adapter
    /// tensors (checkpoint restore). Names and shapes must match the spec's
    /// registry exactly.
    pub fn from_parts(
        base: VarModel<T>,
        spec: AdapterSpec,
        adapter: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        spec.validate(base.config())?;
        let expect = spec.adapter_shapes(base.config());
        if adapter.len() != expect.len() {
            return Err(contract(format!(
                "expected {} adapter tensors, got {}",
                expect.len(),
                adapter.len()
            )));
        }
        for (name, shape) in &expect {
            match adapter.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(contract(format!(
                        "adapter tensor '{name}' has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )))
                }
                None => return Err(contract(format!("missing adapter tensor '{name}'"))),
            }
        }
        let trainable = match spec.kind {
            AdapterKind::Fft => base.params().keys().cloned().collect(),
            _ => adapter.keys().cloned().collect(),
        };
        Ok(Self {
            base,
            spec,
            adapter: adapter
                .into_iter()
                .map(|(k, v)| (k, v.with_grad()))
                .collect(),
            trainable,
        })
    }

    pub fn base(&self) -> &VarModel<T> {
        &self.base
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn config(&self) -> &VarConfig {
        self.base.config()
    }

    pub fn adapter_params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.adapter
    }

    /// Explicit list of trainable parameter names; never contains the fixed
    /// zero key bias.
    pub fn trainable_names(&self) -> &[String] {
        &self.trainable
    }

    /// Resolves a parameter in either the base or the adapter namespace.
    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        if let Some(t) = self.adapter.get(name) {
            return Ok(t);
        }
        self.base.param(name)
    }

    pub(crate) fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if let Some(slot) = self.adapter.get_mut(name) {
            if slot.shape() != value.shape() {
                return Err(contract(format!(
                    "adapter parameter '{name}' shape {:?} cannot take {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            *slot = value.with_grad();
            return Ok(());
        }
        self.base.set_param(name, value)
    }

    pub fn trainable_param_count(&self) -> ParamCount {
        let base: u64 = self
            .base
            .params()
            .values()
            .map(|t| t.len() as u64)
            .sum();
        let added: u64 = self.adapter.values().map(|t| t.len() as u64).sum();
        let trainable: u64 = self
            .trainable
            .iter()
            .map(|n| self.param(n).expect("trainable name resolves").len() as u64)
            .sum();
        let total = base + added;
        ParamCount {
            trainable,
            total,
            fraction: trainable as f64 / total as f64,
        }
    }

    /// Consumes the wrapper, returning the (frozen) base model.
    pub fn into_base(self) -> VarModel<T> {
        self.base
    }
}

/// `(alpha / rank) * B . A` — the low-rank weight update.
pub fn lora_delta<T: Real>(
    b: &Tensor<T>,
    a: &Tensor<T>,
    alpha: f64,
    rank: usize,
) -> Result<Tensor<T>> {
    if b.ndim() != 2 || a.ndim() != 2 || b.shape()[1] != a.shape()[0] {
        return Err(contract(format!(
            "lora_delta: B {:?} and A {:?} have mismatched inner dims",
            b.shape(),
            a.shape()
        )));
    }
    if rank == 0 || b.shape()[1] != rank {
        return Err(contract(format!(
            "lora_delta: inner dim {} does not equal rank {rank}",
            b.shape()[1]
        )));
    }
    let (d, r) = (b.shape()[0], b.shape()[1]);
    let k = a.shape()[1];
    let scale = T::from_f64(alpha / rank as f64);
    let mut out = vec![T::zero(); d * k];
    for i in 0..d {
        for p in 0..r {
            let bip = b.data()[i * r + p];
            let arow = &a.data()[p * k..(p + 1) * k];
            let orow = &mut out[i * k..(i + 1) * k];
            for (o, &av) in orow.iter_mut().zip(arow) {
                *o += bip * av;
            }
        }
    }
    for v in &mut out {
        *v *= scale;
    }
    Tensor::new(vec![d, k], out)
}

/// Folds LoRA pairs into the base weights: `W' = W + (alpha/r) B A`.
pub fn merge_lora<T: Real>(adapted: &AdaptedModel<T>) -> Result<VarModel<T>> {
    if adapted.spec.kind != AdapterKind::Lora {
        return Err(contract("merge_lora requires a LoRA adaptation"));
    }
    let mut merged = adapted.base.clone();
    for layer in 0..merged.config().depth {
        for target in adapted.spec.targets.clone() {
            for name in target.matrix_names(layer) {
                let a = adapted.param(&format!("adapter.{name}.lora_a"))?;
                let b = adapted.param(&format!("adapter.{name}.lora_b"))?;
                let delta = lora_delta(b, a, adapted.spec.alpha, adapted.spec.rank)?;
                let w = merged.param(&name)?;
                let sum = Tensor::new(
                    w.shape().to_vec(),
                    w.data()
                        .iter()
                        .zip(delta.data())
                        .map(|(x, d)| *x + *d)
                        .collect(),
                )?;
                merged.set_param(&name, sum)?;
            }
        }
    }
    Ok(merged)
}

/// FNV-1a over the raw bit patterns; used to assert frozen parameters
/// never change.
pub fn content_hash<T: Real>(t: &Tensor<T>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    };
    for v in t.data() {
        for b in v.as_f64().to_le_bytes() {
            feed(b);
        }
    }
    for &d in t.shape() {
        for b in (d as u64).to_le_bytes() {
            feed(b);
        }
    }
    h
}

/// Hashes of every frozen (non-trainable) parameter.
pub fn frozen_hashes<T: Real>(adapted: &AdaptedModel<T>) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for (name, t) in adapted.base.params() {
        if !adapted.trainable.iter().any(|n| n == name) {
            out.insert(name.clone(), content_hash(t));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model() -> VarModel<f64> {
        VarModel::init(VarConfig::toy(), 1).unwrap()
    }

    #[test]
    fn fft_trains_everything_except_zero_k_bias() {
        let m = toy_model();
        let total_names = m.params().len();
        let adapted = apply_adapter(m, AdapterSpec::fft(), 0).unwrap();
        assert_eq!(adapted.trainable_names().len(), total_names);
        assert!(!adapted.trainable_names().iter().any(|n| n.contains("zero_k")));
        let count = adapted.trainable_param_count();
        assert_eq!(count.trainable, count.total);
        assert_eq!(count.fraction, 1.0);
    }

    #[test]
    fn ln_tuning_trains_only_adaln_copies() {
        let adapted = apply_adapter(toy_model(), AdapterSpec::ln_tuning(), 0).unwrap();
        for name in adapted.trainable_names() {
            assert!(name.starts_with("adapter.blocks.") && name.contains(".ada_"));
        }
        assert_eq!(adapted.trainable_names().len(), 2 * 2); // weight+bias per block
        // copies start equal to the base values
        for i in 0..2 {
            let base = adapted.base().param(&format!("blocks.{i}.ada_w")).unwrap();
            let copy = adapted.param(&format!("adapter.blocks.{i}.ada_w")).unwrap();
            assert_eq!(base.data(), copy.data());
        }
    }

    #[test]
    fn lora_rank_must_fit_target_dims() {
        let cfg = VarConfig::toy(); // width 32
        let spec = AdapterSpec::lora(32, 64.0, 0.0, &[AdapterTarget::AttentionProj]);
        assert!(spec.validate(&cfg).is_err());
        let spec = AdapterSpec::lora(16, 32.0, 0.0, &[AdapterTarget::AttentionProj]);
        spec.validate(&cfg).unwrap();
    }

    #[test]
    fn lora_delta_zero_b_is_zero() {
        let b = Tensor::<f64>::zeros(&[4, 2]);
        let a = Tensor::<f64>::ones(&[2, 3]);
        let d = lora_delta(&b, &a, 4.0, 2).unwrap();
        assert_eq!(d, Tensor::zeros(&[4, 3]));
    }

    #[test]
    fn lora_delta_rank_one_unit_vectors() {
        let mut b = Tensor::<f64>::zeros(&[3, 1]);
        b.data_mut()[0] = 1.0;
        let mut a = Tensor::<f64>::zeros(&[1, 3]);
        a.data_mut()[0] = 1.0;
        let d = lora_delta(&b, &a, 1.0, 1).unwrap();
        let mut expect = Tensor::<f64>::zeros(&[3, 3]);
        expect.data_mut()[0] = 1.0;
        assert_eq!(d, expect);
    }

    #[test]
    fn lora_delta_dim_mismatch_rejected() {
        let b = Tensor::<f64>::zeros(&[4, 2]);
        let a = Tensor::<f64>::zeros(&[3, 3]);
        assert!(lora_delta(&b, &a, 1.0, 2).is_err());
    }

    #[test]
    fn lora_delta_has_rank_at_most_r() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let b = Tensor::<f64>::randn(&[8, 2], 1.0, &mut rng);
        let a = Tensor::<f64>::randn(&[2, 8], 1.0, &mut rng);
        let d = lora_delta(&b, &a, 2.0, 2).unwrap();
        // SVD oracle: singular values beyond r vanish
        let m = nalgebra::DMatrix::from_row_slice(8, 8, d.data());
        let svd = m.svd(false, false);
        let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
        assert!(sv[2] < 1e-10, "third singular value {}", sv[2]);
        assert!(sv[1] > 1e-6);
    }

    #[test]
    fn ablation_variants_distinct_and_as_specified() {
        let a = AdapterSpec::ablation_variant("LoRA-A").unwrap();
        assert_eq!(
            a.targets,
            [AdapterTarget::AttentionQkv, AdapterTarget::AttentionProj]
                .into_iter()
                .collect()
        );
        let m = AdapterSpec::ablation_variant("LoRA-M").unwrap();
        assert_eq!(m.targets, [AdapterTarget::Mlp].into_iter().collect());
        let amln = AdapterSpec::ablation_variant("LoRA-AM+LN").unwrap();
        assert_eq!(amln.targets.len(), 4);
        let ln = AdapterSpec::ablation_variant("LNTuning").unwrap();
        assert_eq!(ln.kind, AdapterKind::LnTuning);
        assert!(AdapterSpec::ablation_variant("LoRA-X").is_err());

        let cfg = VarConfig::toy();
        let mut sets = std::collections::BTreeSet::new();
        for v in ["LoRA-A", "LoRA-M", "LoRA-AM+LN", "LNTuning"] {
            let spec = AdapterSpec::ablation_variant(v).unwrap();
            let names: Vec<String> = spec
                .adapter_shapes(&cfg)
                .keys()
                .cloned()
                .collect();
            assert!(sets.insert(names), "variant {v} not distinct");
        }
    }

    #[test]
    fn count_additivity_and_monotonicity() {
        let cfg = VarConfig::toy();
        let count_of = |targets: &[AdapterTarget]| {
            count_for_config(&cfg, &AdapterSpec::lora(8, 16.0, 0.0, targets))
                .unwrap()
                .trainable
        };
        let qkv = count_of(&[AdapterTarget::AttentionQkv]);
        let mlp = count_of(&[AdapterTarget::Mlp]);
        let both = count_of(&[AdapterTarget::AttentionQkv, AdapterTarget::Mlp]);
        assert_eq!(qkv + mlp, both);
        assert!(both > qkv && both > mlp);
    }

    #[test]
    fn lora_closed_form_count_on_one_matrix() {
        // rank r on one d x d matrix adds exactly 2 d r
        let cfg = VarConfig {
            depth: 1,
            ..VarConfig::toy()
        };
        let spec = AdapterSpec::lora(4, 8.0, 0.0, &[AdapterTarget::AttentionProj]);
        let c = count_for_config(&cfg, &spec).unwrap();
        assert_eq!(c.trainable, 2 * 32 * 4);
    }

    #[test]
    fn full_scale_table_parity() {
        for (depth, lora_m, lnt_m) in [(16usize, 6.03e6, 100.76e6), (20, 9.42e6, 196.76e6)] {
            let cfg = VarConfig::full_scale(depth);
            let lora = count_for_config(&cfg, &AdapterSpec::lora_default()).unwrap();
            assert!(
                (lora.trainable as f64 - lora_m).abs() / lora_m < 0.01,
                "depth {depth}: lora {}",
                lora.trainable
            );
            let lnt = count_for_config(&cfg, &AdapterSpec::ln_tuning()).unwrap();
            assert!(
                (lnt.trainable as f64 - lnt_m).abs() / lnt_m < 0.01,
                "depth {depth}: lnt {}",
                lnt.trainable
            );
        }
    }

    #[test]
    fn merge_with_zero_b_equals_base() {
        let m = toy_model();
        let base_hashes: Vec<u64> = m.params().values().map(content_hash).collect();
        let adapted = apply_adapter(m, AdapterSpec::lora_default(), 3).unwrap();
        let merged = merge_lora(&adapted).unwrap();
        let merged_hashes: Vec<u64> = merged.params().values().map(content_hash).collect();
        assert_eq!(base_hashes, merged_hashes);
    }

    #[test]
    fn merge_requires_lora() {
        let adapted = apply_adapter(toy_model(), AdapterSpec::fft(), 0).unwrap();
        assert!(merge_lora(&adapted).is_err());
    }
}
