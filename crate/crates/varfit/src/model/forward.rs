//! Teacher-forced forward pass, loss graphs, and the packed single-tensor
//! forward variant.
//!
//! The forward pass is recorded on a [`Graph`] with every parameter bound by
//! name, so the same construction serves plain evaluation, full gradients,
//! and per-sample gradients. The next-scale teacher input is built in-graph
//! from token embeddings resampled through the same pyramid geometry the
//! tokenizer uses, so the embedding table receives gradients.

use std::collections::BTreeMap;

use rand::Rng;

use crate::adapters::{AdapterKind, AdapterSpec, AdaptedModel};
use crate::error::{contract, Result};
use crate::resample::resize_matrix;
use crate::tensor::{Bindings, Graph, NodeId, Real, Tensor};
use crate::tokenizer::MultiScaleTokens;

use super::{VarModel, ADALN_CHUNKS};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Applies conditional dropout (per example, with the configured
    /// probability) and LoRA dropout.
    Train,
    Eval,
}

/// Borrowed view over a base model and optional adapter state.
pub(crate) struct ModelView<'m, T: Real> {
    pub model: &'m VarModel<T>,
    pub adapter: Option<(&'m AdapterSpec, &'m BTreeMap<String, Tensor<T>>)>,
}

impl<T: Real> VarModel<T> {
    pub(crate) fn view(&self) -> ModelView<'_, T> {
        ModelView {
            model: self,
            adapter: None,
        }
    }

    /// Name-to-tensor bindings for graph evaluation.
    pub fn bindings(&self) -> Bindings<'_, T> {
        self.params()
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .collect()
    }
}

impl<T: Real> AdaptedModel<T> {
    pub(crate) fn view(&self) -> ModelView<'_, T> {
        ModelView {
            model: self.base(),
            adapter: Some((self.spec(), self.adapter_params())),
        }
    }

    pub fn bindings(&self) -> Bindings<'_, T> {
        let mut b: Bindings<'_, T> = self
            .base()
            .params()
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .collect();
        for (k, v) in self.adapter_params() {
            b.insert(k.as_str(), v);
        }
        b
    }
}

impl<'m, T: Real> ModelView<'m, T> {
    fn tensor(&self, name: &str) -> Result<&'m Tensor<T>> {
        if let Some((_, adapter)) = &self.adapter {
            if let Some(t) = adapter.get(name) {
                return Ok(t);
            }
        }
        self.model.param(name)
    }

    pub(crate) fn bindings(&self) -> Bindings<'m, T> {
        let mut b: Bindings<'m, T> = self
            .model
            .params()
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .collect();
        if let Some((_, adapter)) = &self.adapter {
            for (k, v) in adapter.iter() {
                b.insert(k.as_str(), v);
            }
        }
        b
    }
}

/// Graph under construction plus the node registry for bound parameters.
pub(crate) struct BuildCtx<'m, T: Real> {
    pub view: ModelView<'m, T>,
    pub g: Graph<T>,
    pub nodes: BTreeMap<String, NodeId>,
    train: bool,
    lora_mask_seed: u64,
}

impl<'m, T: Real> BuildCtx<'m, T> {
    pub(crate) fn new(view: ModelView<'m, T>, batch: usize, mode: ForwardMode) -> Self {
        Self {
            view,
            g: Graph::with_batch(batch),
            nodes: BTreeMap::new(),
            train: mode == ForwardMode::Train,
            lora_mask_seed: 0,
        }
    }

    fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.nodes.get(name) {
            return Ok(id);
        }
        let shape = self.view.tensor(name)?.shape().to_vec();
        let id = self.g.input(name, &shape)?;
        self.nodes.insert(name.to_string(), id);
        Ok(id)
    }

    /// `x . W^T (+ b)`, with the LoRA branch added when `w_name` is a
    /// targeted matrix: the three decomposed steps keep the low-rank pair
    /// visible to the gradient machinery.
    fn linear(&mut self, x: NodeId, w_name: &str, b_name: Option<&str>) -> Result<NodeId> {
        let w = self.param(w_name)?;
        let wt = self.g.permute(w, &[1, 0])?;
        let mut y = self.g.matmul(x, wt)?;

        let pair = self
            .view
            .adapter
            .as_ref()
            .and_then(|(spec, _)| spec.lora_pair_for(w_name));
        if let Some((a_name, b_mat_name)) = pair {
            let (scale, dropout) = {
                let (spec, _) = self.view.adapter.as_ref().expect("lora pair implies adapter");
                (spec.scaling(), spec.dropout)
            };
            let mut xin = x;
            if self.train && dropout > 0.0 {
                // per-build Bernoulli mask scaled by 1/(1-p)
                let shape = self.g.shape(x).to_vec();
                let n: usize = shape.iter().product();
                let mut rng =
                    crate::rng::derive_rng(self.lora_mask_seed, &[0xd0, self.g.node_count() as u64]);
                let keep = T::from_f64(1.0 / (1.0 - dropout));
                let mask = Tensor::from_raw(
                    shape,
                    (0..n)
                        .map(|_| {
                            if rng.gen::<f64>() < dropout {
                                T::zero()
                            } else {
                                keep
                            }
                        })
                        .collect(),
                );
                let mask = self.g.constant(mask);
                xin = self.g.mul(x, mask)?;
            }
            let a = self.param(&a_name)?;
            let b_mat = self.param(&b_mat_name)?;
            let at = self.g.permute(a, &[1, 0])?;
            let bt = self.g.permute(b_mat, &[1, 0])?;
            let h = self.g.matmul(xin, at)?;
            let lo = self.g.matmul(h, bt)?;
            let lo = self.g.scale(lo, T::from_f64(scale))?;
            y = self.g.add(y, lo)?;
        }

        if let Some(bn) = b_name {
            let b = self.param(bn)?;
            y = self.g.add(y, b)?;
        }
        Ok(y)
    }

    /// AdaLN conditioning map; LNTuning routes through its trainable copy.
    fn ada_lin(&mut self, cond: NodeId, layer: usize) -> Result<NodeId> {
        let ln_tuning = matches!(
            self.view.adapter,
            Some((spec, _)) if spec.kind == AdapterKind::LnTuning
        );
        let (w_name, b_name) = if ln_tuning {
            (
                format!("adapter.blocks.{layer}.ada_w"),
                format!("adapter.blocks.{layer}.ada_b"),
            )
        } else {
            (
                format!("blocks.{layer}.ada_w"),
                format!("blocks.{layer}.ada_b"),
            )
        };
        let h = self.g.silu(cond)?;
        self.linear(h, &w_name, Some(&b_name))
    }

    /// The decomposed qkv computation: linear map through the (possibly
    /// adapter-wrapped) fused matrix, explicit addition of
    /// `concat(q_bias, zero_k_bias, v_bias)`, then reshape.
    /// Returns `(q, k, v)`, each `batch x L x heads x head_dim`.
    pub(crate) fn qkv(&mut self, x: NodeId, layer: usize) -> Result<(NodeId, NodeId, NodeId)> {
        let cfg = self.view.model.config().clone();
        let (heads, hd, w) = (cfg.heads, cfg.head_dim(), cfg.width);
        let shape = self.g.shape(x).to_vec();
        let (b, l) = (shape[0], shape[1]);

        let lin = self.linear(x, &format!("blocks.{layer}.qkv_w"), None)?;
        let qb = self.param(&format!("blocks.{layer}.q_bias"))?;
        let vb = self.param(&format!("blocks.{layer}.v_bias"))?;
        let zk = self.g.constant(self.view.model.zero_k_bias());
        let bias = self.g.concat(&[qb, zk, vb], 0)?;
        let biased = self.g.add(lin, bias)?;
        let qkv = self.g.reshape(biased, &[b, l, 3, heads, hd])?;

        let mut split = Vec::with_capacity(3);
        for i in 0..3 {
            let s = self.g.slice(qkv, 2, i, i + 1)?;
            split.push(self.g.reshape(s, &[b, l, heads, hd])?);
        }
        let _ = w;
        Ok((split[0], split[1], split[2]))
    }

    fn attention(&mut self, x: NodeId, layer: usize) -> Result<NodeId> {
        let cfg = self.view.model.config().clone();
        let (b, l) = {
            let s = self.g.shape(x);
            (s[0], s[1])
        };
        let (q, k, v) = self.qkv(x, layer)?;
        let q = self.g.permute(q, &[0, 2, 1, 3])?; // (B,H,L,hd)
        let kt = self.g.permute(k, &[0, 2, 3, 1])?; // (B,H,hd,L)
        let v = self.g.permute(v, &[0, 2, 1, 3])?;

        let scores = self.g.matmul(q, kt)?;
        let scores = self
            .g
            .scale(scores, T::from_f64(1.0 / (cfg.head_dim() as f64).sqrt()))?;
        let mask = self.g.constant(self.view.model.attention_bias().to_tensor());
        let scores = self.g.add(scores, mask)?;
        let attn = self.g.softmax(scores)?;
        let out = self.g.matmul(attn, v)?; // (B,H,L,hd)
        let out = self.g.permute(out, &[0, 2, 1, 3])?;
        let out = self.g.reshape(out, &[b, l, cfg.width])?;
        self.linear(
            out,
            &format!("blocks.{layer}.proj_w"),
            Some(&format!("blocks.{layer}.proj_b")),
        )
    }

    fn modulate(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let one_plus = self.g.add_scalar(scale, T::one())?;
        let scaled = self.g.mul(x, one_plus)?;
        self.g.add(scaled, shift)
    }

    fn block(&mut self, x: NodeId, cond: NodeId, layer: usize) -> Result<NodeId> {
        let w = self.view.model.config().width;
        let b = self.g.shape(cond)[0];
        let ada = self.ada_lin(cond, layer)?; // (B, 6w)
        let mut chunks = Vec::with_capacity(ADALN_CHUNKS);
        for i in 0..ADALN_CHUNKS {
            let c = self.g.slice(ada, 1, i * w, (i + 1) * w)?;
            chunks.push(self.g.reshape(c, &[b, 1, w])?);
        }
        let (s1, sh1, g1, s2, sh2, g2) =
            (chunks[0], chunks[1], chunks[2], chunks[3], chunks[4], chunks[5]);

        let xa = self.g.layer_norm(x, LN_EPS)?;
        let xa = self.modulate(xa, s1, sh1)?;
        let attn = self.attention(xa, layer)?;
        let gated = self.g.mul(attn, g1)?;
        let x = self.g.add(x, gated)?;

        let xm = self.g.layer_norm(x, LN_EPS)?;
        let xm = self.modulate(xm, s2, sh2)?;
        let h = self.linear(
            xm,
            &format!("blocks.{layer}.fc1_w"),
            Some(&format!("blocks.{layer}.fc1_b")),
        )?;
        let h = self.g.gelu(h)?;
        let h = self.linear(
            h,
            &format!("blocks.{layer}.fc2_w"),
            Some(&format!("blocks.{layer}.fc2_b")),
        )?;
        let gated = self.g.mul(h, g2)?;
        self.g.add(x, gated)
    }

    /// Full transformer: class token plus teacher rows, positional and level
    /// embeddings, AdaLN blocks, modulated head.
    pub(crate) fn transformer(
        &mut self,
        labels: &[usize],
        teacher: Option<NodeId>,
    ) -> Result<NodeId> {
        let cfg = self.view.model.config().clone();
        let b = labels.len();
        let l = cfg.seq_len();
        let w = cfg.width;

        let class_emb = self.param("class_emb")?;
        let cond = self.g.embedding(class_emb, labels.to_vec(), vec![b], true)?; // (B,w)
        let sos = self.g.reshape(cond, &[b, 1, w])?;

        let mut x = match teacher {
            Some(t) => {
                let ts = self.g.shape(t).to_vec();
                if ts != [b, l - 1, w] {
                    return Err(contract(format!(
                        "teacher input shape {ts:?}, expected [{b}, {}, {w}]",
                        l - 1
                    )));
                }
                self.g.concat(&[sos, t], 1)?
            }
            None => {
                if l != 1 {
                    return Err(contract("teacher input required when seq_len > 1"));
                }
                sos
            }
        };

        let pos = self.param("pos_emb")?;
        x = self.g.add(x, pos)?;
        let lvl_emb = self.param("lvl_emb")?;
        let lvl_values = self.view.model.level_index().values().to_vec();
        let lvl = self.g.embedding(lvl_emb, lvl_values, vec![l], false)?; // (L,w)
        x = self.g.add(x, lvl)?;

        for layer in 0..cfg.depth {
            x = self.block(x, cond, layer)?;
        }

        let xf = self.g.layer_norm(x, LN_EPS)?;
        let hc = self.g.silu(cond)?;
        let ha = self.linear(hc, "head_ada_w", Some("head_ada_b"))?; // (B, 2w)
        let s = self.g.slice(ha, 1, 0, w)?;
        let s = self.g.reshape(s, &[b, 1, w])?;
        let sh = self.g.slice(ha, 1, w, 2 * w)?;
        let sh = self.g.reshape(sh, &[b, 1, w])?;
        let xf = self.modulate(xf, s, sh)?;
        self.linear(xf, "head_w", Some("head_b"))
    }

    /// Next-scale teacher input `(B, L-1, width)` built from token grids:
    /// per-scale token embeddings are accumulated at the finest grid and
    /// resampled down to each following scale, mirroring the tokenizer's
    /// residual recursion. `known_scales` limits how many grids are read;
    /// later rows are zero (generation fills them scale by scale).
    pub(crate) fn teacher_from_tokens(
        &mut self,
        tokens: &[&MultiScaleTokens],
        known_scales: usize,
    ) -> Result<Option<NodeId>> {
        let cfg = self.view.model.config().clone();
        let pn = &cfg.patch_nums;
        let s_total = pn.len();
        if s_total == 1 {
            return Ok(None);
        }
        let b = tokens.len();
        for t in tokens {
            if t.patch_nums() != pn.as_slice() {
                return Err(contract(format!(
                    "tokens have patch_nums {:?}, model expects {:?}",
                    t.patch_nums(),
                    pn
                )));
            }
        }
        let w = cfg.width;
        let p_ref = *pn.last().unwrap();
        let tok_emb = self.param("tok_emb")?;

        let mut acc: Option<NodeId> = None;
        let mut parts = Vec::with_capacity(s_total - 1);
        for t in 1..s_total {
            if t <= known_scales {
                let p_prev = pn[t - 1];
                let mut indices = Vec::with_capacity(b * p_prev * p_prev);
                for tk in tokens {
                    indices.extend_from_slice(tk.grid(t - 1));
                }
                let emb = self
                    .g
                    .embedding(tok_emb, indices, vec![b, p_prev * p_prev], true)?;
                let up = resize_const(&mut self.g, p_prev, p_ref)?;
                let lifted = self.g.matmul(up, emb)?; // (B, p_ref^2, w)
                acc = Some(match acc {
                    Some(a) => self.g.add(a, lifted)?,
                    None => lifted,
                });
                let down = resize_const(&mut self.g, p_ref, pn[t])?;
                parts.push(self.g.matmul(down, acc.unwrap())?);
            } else {
                let p = pn[t];
                parts.push(self.g.constant(Tensor::zeros(&[b, p * p, w])));
            }
        }
        Ok(Some(self.g.concat(&parts, 1)?))
    }
}

fn resize_const<T: Real>(g: &mut Graph<T>, from: usize, to: usize) -> Result<NodeId> {
    let m = resize_matrix(from, to);
    let t = Tensor::from_raw(
        vec![to * to, from * from],
        m.into_iter().map(T::from_f64).collect(),
    );
    Ok(g.constant(t))
}

fn validate_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(contract("empty label batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(contract(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

/// Per-example conditional dropout: replaces the label by the unconditional
/// row. With probability zero the rng is not consumed at all.
fn apply_cond_drop<R: Rng>(
    labels: &[usize],
    num_classes: usize,
    prob: f64,
    mode: ForwardMode,
    rng: &mut R,
) -> Vec<usize> {
    if mode != ForwardMode::Train || prob == 0.0 {
        return labels.to_vec();
    }
    labels
        .iter()
        .map(|&l| if rng.gen::<f64>() < prob { num_classes } else { l })
        .collect()
}

/// Appends the cross-entropy composite to a graph holding logits.
fn cross_entropy_nodes<T: Real>(
    g: &mut Graph<T>,
    logits: NodeId,
    targets: &[usize],
) -> Result<(NodeId, NodeId)> {
    let logp = g.log_softmax(logits)?;
    let picked = g.gather_last(logp, targets.to_vec())?;
    let nll = g.neg(picked)?;
    let per_example = g.mean_axis(nll, 1)?;
    let mean = g.mean_axis(per_example, 0)?;
    Ok((per_example, mean))
}

/// A complete teacher-forced loss graph over one batch.
pub struct LossGraph<T: Real> {
    pub graph: Graph<T>,
    pub logits: NodeId,
    /// Length-`batch` per-example mean cross-entropy.
    pub per_example_loss: NodeId,
    /// Batch-mean scalar loss.
    pub mean_loss: NodeId,
}

fn loss_graph_impl<T: Real, R: Rng>(
    view: ModelView<'_, T>,
    labels: &[usize],
    tokens: &[&MultiScaleTokens],
    mode: ForwardMode,
    rng: &mut R,
) -> Result<LossGraph<T>> {
    let cfg = view.model.config().clone();
    validate_labels(labels, cfg.num_classes)?;
    if labels.len() != tokens.len() {
        return Err(contract(format!(
            "{} labels vs {} token sets",
            labels.len(),
            tokens.len()
        )));
    }
    validate_targets(tokens, cfg.vocab)?;
    let labels = apply_cond_drop(labels, cfg.num_classes, cfg.cond_drop_prob, mode, rng);
    let mut ctx = BuildCtx::new(view, tokens.len(), mode);
    ctx.lora_mask_seed = rng.gen();
    let teacher = ctx.teacher_from_tokens(tokens, cfg.num_scales())?;
    let logits = ctx.transformer(&labels, teacher)?;
    let mut targets = Vec::with_capacity(tokens.len() * cfg.seq_len());
    for t in tokens {
        targets.extend(t.flattened());
    }
    let (per_example_loss, mean_loss) = cross_entropy_nodes(&mut ctx.g, logits, &targets)?;
    Ok(LossGraph {
        graph: ctx.g,
        logits,
        per_example_loss,
        mean_loss,
    })
}

fn validate_targets(tokens: &[&MultiScaleTokens], vocab: usize) -> Result<()> {
    for t in tokens {
        if t.max_index() >= vocab {
            return Err(contract(format!(
                "target token {} out of range for vocabulary {vocab}",
                t.max_index()
            )));
        }
    }
    Ok(())
}

fn forward_impl<T: Real, R: Rng>(
    view: ModelView<'_, T>,
    labels: &[usize],
    teacher: &Tensor<T>,
    mode: ForwardMode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let cfg = view.model.config().clone();
    validate_labels(labels, cfg.num_classes)?;
    let b = labels.len();
    let l = cfg.seq_len();
    let expected = [b, l - 1, cfg.width];
    if teacher.shape() != expected {
        return Err(contract(format!(
            "teacher input shape {:?}, expected {:?}",
            teacher.shape(),
            expected
        )));
    }
    let labels = apply_cond_drop(labels, cfg.num_classes, cfg.cond_drop_prob, mode, rng);
    let mut ctx = BuildCtx::new(view, b, mode);
    ctx.lora_mask_seed = rng.gen();
    let teacher_node = if l > 1 {
        Some(ctx.g.batch_input("teacher_input", &expected)?)
    } else {
        None
    };
    let logits = ctx.transformer(&labels, teacher_node)?;
    let mut bindings = ctx.view.bindings();
    bindings.insert("teacher_input", teacher);
    let ev = ctx.g.evaluate(&bindings)?;
    Ok(ev.value(logits).clone())
}

/// Packs labels and a flattened teacher input into one
/// `(B, 1 + (L-1) * width)` tensor.
pub fn pack_concat<T: Real>(labels: &[usize], teacher: &Tensor<T>) -> Result<Tensor<T>> {
    if teacher.ndim() != 3 || teacher.shape()[0] != labels.len() {
        return Err(contract(format!(
            "teacher shape {:?} incompatible with {} labels",
            teacher.shape(),
            labels.len()
        )));
    }
    let b = labels.len();
    let row = teacher.shape()[1] * teacher.shape()[2];
    let mut data = Vec::with_capacity(b * (1 + row));
    for (i, &label) in labels.iter().enumerate() {
        data.push(T::from_f64(label as f64));
        data.extend_from_slice(&teacher.data()[i * row..(i + 1) * row]);
    }
    Tensor::new(vec![b, 1 + row], data)
}

/// Inverse of [`pack_concat`] for a model of the given geometry.
pub fn unpack_concat<T: Real>(
    concat: &Tensor<T>,
    seq_len: usize,
    width: usize,
) -> Result<(Vec<usize>, Tensor<T>)> {
    if concat.ndim() != 2 {
        return Err(contract("packed tensor must be rank 2"));
    }
    let b = concat.shape()[0];
    let row = (seq_len - 1) * width;
    if concat.shape()[1] != 1 + row {
        return Err(contract(format!(
            "packed row length {}, expected {}",
            concat.shape()[1],
            1 + row
        )));
    }
    let mut labels = Vec::with_capacity(b);
    let mut teacher = Vec::with_capacity(b * row);
    for i in 0..b {
        let v = concat.data()[i * (1 + row)].as_f64();
        let rounded = v.round();
        if (v - rounded).abs() > 1e-6 || rounded < 0.0 {
            return Err(contract(format!("packed label slot holds {v}, not an index")));
        }
        labels.push(rounded as usize);
        teacher.extend_from_slice(&concat.data()[i * (1 + row) + 1..(i + 1) * (1 + row)]);
    }
    Ok((labels, Tensor::new(vec![b, seq_len - 1, width], teacher)?))
}

fn forward_concat_impl<T: Real, R: Rng>(
    view: ModelView<'_, T>,
    concat: &Tensor<T>,
    mode: ForwardMode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let cfg = view.model.config().clone();
    let (labels, _) = unpack_concat(concat, cfg.seq_len(), cfg.width)?;
    validate_labels(&labels, cfg.num_classes)?;
    let labels = apply_cond_drop(&labels, cfg.num_classes, cfg.cond_drop_prob, mode, rng);
    let b = concat.shape()[0];
    let l = cfg.seq_len();
    let w = cfg.width;

    let mut ctx = BuildCtx::new(view, b, mode);
    ctx.lora_mask_seed = rng.gen();
    let input = ctx.g.batch_input("concat_input", concat.shape())?;
    let teacher_node = if l > 1 {
        let t = ctx.g.slice(input, 1, 1, 1 + (l - 1) * w)?;
        Some(ctx.g.reshape(t, &[b, l - 1, w])?)
    } else {
        None
    };
    let logits = ctx.transformer(&labels, teacher_node)?;
    let mut bindings = ctx.view.bindings();
    bindings.insert("concat_input", concat);
    let ev = ctx.g.evaluate(&bindings)?;
    Ok(ev.value(logits).clone())
}

fn qkv_projection_impl<T: Real>(
    view: ModelView<'_, T>,
    x: &Tensor<T>,
    layer: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let cfg = view.model.config().clone();
    if layer >= cfg.depth {
        return Err(contract(format!(
            "layer {layer} out of range for depth {}",
            cfg.depth
        )));
    }
    if x.ndim() != 3 || x.shape()[2] != cfg.width {
        return Err(contract(format!(
            "qkv input shape {:?}, expected (batch, positions, {})",
            x.shape(),
            cfg.width
        )));
    }
    let mut ctx = BuildCtx::new(view, x.shape()[0], ForwardMode::Eval);
    let xin = ctx.g.batch_input("qkv_input", x.shape())?;
    let (q, k, v) = ctx.qkv(xin, layer)?;
    let mut bindings = ctx.view.bindings();
    bindings.insert("qkv_input", x);
    let ev = ctx.g.evaluate(&bindings)?;
    Ok((
        ev.value(q).clone(),
        ev.value(k).clone(),
        ev.value(v).clone(),
    ))
}

macro_rules! forward_api {
    ($ty:ident) => {
        impl<T: Real> $ty<T> {
            /// Teacher-forced logits `(B, L, vocab)` from class labels and a
            /// `(B, L-1, width)` teacher input.
            pub fn forward<R: Rng>(
                &self,
                labels: &[usize],
                teacher: &Tensor<T>,
                mode: ForwardMode,
                rng: &mut R,
            ) -> Result<Tensor<T>> {
                forward_impl(self.view(), labels, teacher, mode, rng)
            }

            /// Forward pass over the packed single-tensor input; unpacks by
            /// slicing and then equals [`Self::forward`] exactly.
            pub fn forward_concat<R: Rng>(
                &self,
                concat: &Tensor<T>,
                mode: ForwardMode,
                rng: &mut R,
            ) -> Result<Tensor<T>> {
                forward_concat_impl(self.view(), concat, mode, rng)
            }

            /// Decomposed qkv projection of block `layer`; returns
            /// `(q, k, v)`, each `(B, positions, heads, head_dim)`.
            pub fn qkv_projection(
                &self,
                x: &Tensor<T>,
                layer: usize,
            ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
                qkv_projection_impl(self.view(), x, layer)
            }

            /// Teacher-forced loss graph over a batch of token pyramids;
            /// the teacher input is built in-graph so all embeddings train.
            pub fn loss_graph<R: Rng>(
                &self,
                labels: &[usize],
                tokens: &[&MultiScaleTokens],
                mode: ForwardMode,
                rng: &mut R,
            ) -> Result<LossGraph<T>> {
                loss_graph_impl(self.view(), labels, tokens, mode, rng)
            }

            /// The `(B, L-1, width)` teacher input for a batch of token
            /// pyramids, materialized as a tensor.
            pub fn teacher_input(&self, tokens: &[&MultiScaleTokens]) -> Result<Tensor<T>> {
                let cfg = self.view().model.config().clone();
                let b = tokens.len();
                if b == 0 {
                    return Err(contract("empty token batch"));
                }
                let mut ctx = BuildCtx::new(self.view(), b, ForwardMode::Eval);
                match ctx.teacher_from_tokens(tokens, cfg.num_scales())? {
                    Some(node) => {
                        let bindings = ctx.view.bindings();
                        let ev = ctx.g.evaluate(&bindings)?;
                        Ok(ev.value(node).clone())
                    }
                    None => Ok(Tensor::zeros(&[b, 0, cfg.width])),
                }
            }
        }
    };
}

forward_api!(VarModel);
forward_api!(AdaptedModel);

/// Mean cross-entropy of logits `(B, L, V)` against flattened targets.
pub fn ar_loss<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    let per = ar_loss_per_example(logits, targets)?;
    let n = T::from_f64(per.len() as f64);
    Ok(per.into_iter().sum::<T>() / n)
}

/// Per-example mean cross-entropy, one entry per batch row.
pub fn ar_loss_per_example<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<Vec<T>> {
    if logits.ndim() != 3 {
        return Err(contract(format!(
            "logits must be (batch, positions, vocab), got {:?}",
            logits.shape()
        )));
    }
    let (b, l, v) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    if targets.len() != b * l {
        return Err(contract(format!(
            "expected {} targets, got {}",
            b * l,
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(contract(format!(
            "target {bad} out of range for vocabulary {v}"
        )));
    }
    let mut g = Graph::<T>::with_batch(b);
    let input = g.batch_input("logits", &[b, l, v])?;
    let (per, _) = cross_entropy_nodes(&mut g, input, targets)?;
    let mut bindings = Bindings::new();
    bindings.insert("logits", logits);
    let ev = g.evaluate(&bindings)?;
    Ok(ev.value(per).data().to_vec())
}
