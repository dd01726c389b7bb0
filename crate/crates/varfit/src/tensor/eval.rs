//! Forward evaluation and reverse-mode differentiation of a [`Graph`].

use std::collections::BTreeMap;

use crate::error::{contract, numeric, Result};
use crate::tensor::graph::{broadcast_shapes, Bindings, Graph, NodeId, OpKind};
use crate::tensor::{strides_of, Real, Tensor};

/// Materialized forward pass: one value per graph node.
pub struct Evaluation<'g, T: Real> {
    graph: &'g Graph<T>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Graph<T> {
    /// Runs the forward pass with `bindings` supplying every declared input.
    ///
    /// Fails with a contract error when an input is missing or has the wrong
    /// shape, and with a numeric error naming the offending node when any
    /// intermediate value is non-finite.
    pub fn evaluate<'g>(&'g self, bindings: &Bindings<'_, T>) -> Result<Evaluation<'g, T>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let id = NodeId(i);
            let value = match &node.op {
                OpKind::Input(name) => {
                    let t = bindings.get(name.as_str()).ok_or_else(|| {
                        contract(format!("no binding for {}", self.label(id)))
                    })?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(contract(format!(
                            "binding for {} has shape {:?}, declared {:?}",
                            self.label(id),
                            t.shape(),
                            node.shape
                        )));
                    }
                    (*t).clone()
                }
                OpKind::Constant(t) => t.clone(),
                OpKind::Add => bin_op(&values[node.inputs[0].0], &values[node.inputs[1].0], &node.shape, |a, b| a + b),
                OpKind::Sub => bin_op(&values[node.inputs[0].0], &values[node.inputs[1].0], &node.shape, |a, b| a - b),
                OpKind::Mul => bin_op(&values[node.inputs[0].0], &values[node.inputs[1].0], &node.shape, |a, b| a * b),
                OpKind::Neg => map_op(&values[node.inputs[0].0], |v| -v),
                OpKind::Scale(c) => {
                    let c = *c;
                    map_op(&values[node.inputs[0].0], |v| v * c)
                }
                OpKind::AddScalar(c) => {
                    let c = *c;
                    map_op(&values[node.inputs[0].0], |v| v + c)
                }
                OpKind::Relu => map_op(&values[node.inputs[0].0], |v| if v > T::zero() { v } else { T::zero() }),
                OpKind::Tanh => map_op(&values[node.inputs[0].0], |v| v.tanh()),
                OpKind::Silu => map_op(&values[node.inputs[0].0], silu),
                OpKind::Gelu => map_op(&values[node.inputs[0].0], gelu),
                OpKind::MatMul => matmul_fwd(&values[node.inputs[0].0], &values[node.inputs[1].0], &node.shape),
                OpKind::SoftmaxLast => softmax_fwd(&values[node.inputs[0].0]),
                OpKind::LogSoftmaxLast => log_softmax_fwd(&values[node.inputs[0].0]),
                OpKind::LayerNormLast { eps } => layer_norm_fwd(&values[node.inputs[0].0], *eps),
                OpKind::Embedding { indices, .. } => embedding_fwd(&values[node.inputs[0].0], indices, &node.shape),
                OpKind::GatherLast { indices } => gather_last_fwd(&values[node.inputs[0].0], indices),
                OpKind::Reshape => {
                    let x = &values[node.inputs[0].0];
                    Tensor::from_raw(node.shape.clone(), x.data().to_vec())
                }
                OpKind::Permute { axes } => permute_fwd(&values[node.inputs[0].0], axes),
                OpKind::Slice { axis, start, end } => slice_fwd(&values[node.inputs[0].0], *axis, *start, *end),
                OpKind::Concat { axis } => {
                    let parts: Vec<&Tensor<T>> = node.inputs.iter().map(|i| &values[i.0]).collect();
                    concat_fwd(&parts, *axis, &node.shape)
                }
                OpKind::SumAxis { axis } => reduce_axis(&values[node.inputs[0].0], *axis, false),
                OpKind::MeanAxis { axis } => reduce_axis(&values[node.inputs[0].0], *axis, true),
            };
            if value.data().iter().any(|v| !v.is_finite()) {
                return Err(numeric(format!(
                    "non-finite value produced at {}",
                    self.label(id)
                )));
            }
            values.push(value);
        }
        Ok(Evaluation { graph: self, values })
    }
}

impl<'g, T: Real> Evaluation<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// d(loss)/d(node) for each requested node. `loss` must be rank 0.
    /// Nodes not on any path to the loss get exact zeros.
    pub fn gradient(&self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor<T>>> {
        if !self.graph.shape(loss).is_empty() {
            return Err(contract(format!(
                "gradient requires a scalar loss, {} has shape {:?}",
                self.graph.label(loss),
                self.graph.shape(loss)
            )));
        }
        let grads = self.backward(loss, Tensor::scalar(T::one()))?;
        Ok(self.collect(wrt, grads))
    }

    /// Gradients keyed by input name, for the graph's named inputs.
    pub fn gradient_named(&self, loss: NodeId, names: &[&str]) -> Result<BTreeMap<String, Tensor<T>>> {
        let ids = self.resolve(names)?;
        let grads = self.gradient(loss, &ids)?;
        Ok(names
            .iter()
            .map(|n| n.to_string())
            .zip(grads)
            .collect())
    }

    /// Per-example gradients of a per-example loss vector.
    ///
    /// `loss_vec` must be a batched, uncoupled vector with one entry per
    /// example; entry `i` of the result equals `gradient(loss_vec[i], wrt)`.
    /// Equivalent to looping single-example backward passes over one shared
    /// forward pass.
    pub fn per_sample_gradients(&self, loss_vec: NodeId, wrt: &[NodeId]) -> Result<Vec<Vec<Tensor<T>>>> {
        let b = match self.graph.batch() {
            Some(b) => b,
            None => {
                return Err(contract(
                    "per_sample_gradients requires a graph with a declared batch size",
                ))
            }
        };
        if self.graph.shape(loss_vec) != [b] {
            return Err(contract(format!(
                "per-sample loss {} must have shape [{b}], got {:?}",
                self.graph.label(loss_vec),
                self.graph.shape(loss_vec)
            )));
        }
        if self.graph.is_coupled(loss_vec) || !self.graph.is_batched(loss_vec) {
            return Err(contract(format!(
                "per-sample loss {} couples examples across the batch axis",
                self.graph.label(loss_vec)
            )));
        }
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let mut seed = Tensor::zeros(&[b]);
            seed.data_mut()[i] = T::one();
            let grads = self.backward(loss_vec, seed)?;
            out.push(self.collect(wrt, grads));
        }
        Ok(out)
    }

    /// Per-sample gradients keyed by input name.
    pub fn per_sample_gradients_named(
        &self,
        loss_vec: NodeId,
        names: &[&str],
    ) -> Result<Vec<BTreeMap<String, Tensor<T>>>> {
        let ids = self.resolve(names)?;
        let per = self.per_sample_gradients(loss_vec, &ids)?;
        Ok(per
            .into_iter()
            .map(|gs| names.iter().map(|n| n.to_string()).zip(gs).collect())
            .collect())
    }

    fn resolve(&self, names: &[&str]) -> Result<Vec<NodeId>> {
        names
            .iter()
            .map(|n| {
                self.graph
                    .input_id(n)
                    .ok_or_else(|| contract(format!("unknown input '{n}'")))
            })
            .collect()
    }

    fn collect(&self, wrt: &[NodeId], mut grads: Vec<Option<Tensor<T>>>) -> Vec<Tensor<T>> {
        wrt.iter()
            .map(|id| {
                grads[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.graph.shape(*id)))
            })
            .collect()
    }

    /// One reverse sweep; every node is visited exactly once, in reverse
    /// topological (construction) order.
    fn backward(&self, root: NodeId, seed: Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let nodes = &self.graph.nodes;
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let g_out = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[i];
            match &node.op {
                OpKind::Input(_) | OpKind::Constant(_) => {
                    grads[i] = Some(g_out);
                    continue;
                }
                OpKind::Add => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    accumulate(&mut grads, a, reduce_to_shape(&g_out, self.graph.shape(a)));
                    accumulate(&mut grads, b, reduce_to_shape(&g_out, self.graph.shape(b)));
                }
                OpKind::Sub => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    accumulate(&mut grads, a, reduce_to_shape(&g_out, self.graph.shape(a)));
                    let neg = map_op(&g_out, |v| -v);
                    accumulate(&mut grads, b, reduce_to_shape(&neg, self.graph.shape(b)));
                }
                OpKind::Mul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let ga = bin_op(&g_out, &self.values[b.0], g_out.shape(), |g, v| g * v);
                    let gb = bin_op(&g_out, &self.values[a.0], g_out.shape(), |g, v| g * v);
                    accumulate(&mut grads, a, reduce_to_shape(&ga, self.graph.shape(a)));
                    accumulate(&mut grads, b, reduce_to_shape(&gb, self.graph.shape(b)));
                }
                OpKind::Neg => {
                    accumulate(&mut grads, node.inputs[0], map_op(&g_out, |v| -v));
                }
                OpKind::Scale(c) => {
                    let c = *c;
                    accumulate(&mut grads, node.inputs[0], map_op(&g_out, |v| v * c));
                }
                OpKind::AddScalar(_) => {
                    accumulate(&mut grads, node.inputs[0], g_out);
                }
                OpKind::Relu => {
                    let x = &self.values[node.inputs[0].0];
                    let gx = zip_op(&g_out, x, |g, v| if v > T::zero() { g } else { T::zero() });
                    accumulate(&mut grads, node.inputs[0], gx);
                }
                OpKind::Tanh => {
                    let y = &self.values[i];
                    let gx = zip_op(&g_out, y, |g, t| g * (T::one() - t * t));
                    accumulate(&mut grads, node.inputs[0], gx);
                }
                OpKind::Silu => {
                    let x = &self.values[node.inputs[0].0];
                    let gx = zip_op(&g_out, x, |g, v| g * silu_grad(v));
                    accumulate(&mut grads, node.inputs[0], gx);
                }
                OpKind::Gelu => {
                    let x = &self.values[node.inputs[0].0];
                    let gx = zip_op(&g_out, x, |g, v| g * gelu_grad(v));
                    accumulate(&mut grads, node.inputs[0], gx);
                }
                OpKind::MatMul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let va = &self.values[a.0];
                    let vb = &self.values[b.0];
                    // dA = dY . B^T, dB = A^T . dY, reduced over broadcast batch dims
                    let bt = transpose_last(vb);
                    let at = transpose_last(va);
                    let da_shape = matmul_shape(g_out.shape(), bt.shape());
                    let db_shape = matmul_shape(at.shape(), g_out.shape());
                    let da = matmul_fwd(&g_out, &bt, &da_shape);
                    let db = matmul_fwd(&at, &g_out, &db_shape);
                    accumulate(&mut grads, a, reduce_to_shape(&da, self.graph.shape(a)));
                    accumulate(&mut grads, b, reduce_to_shape(&db, self.graph.shape(b)));
                }
                OpKind::SoftmaxLast => {
                    let y = &self.values[i];
                    accumulate(&mut grads, node.inputs[0], softmax_bwd(y, &g_out));
                }
                OpKind::LogSoftmaxLast => {
                    let y = &self.values[i];
                    accumulate(&mut grads, node.inputs[0], log_softmax_bwd(y, &g_out));
                }
                OpKind::LayerNormLast { eps } => {
                    let x = &self.values[node.inputs[0].0];
                    accumulate(&mut grads, node.inputs[0], layer_norm_bwd(x, &g_out, *eps));
                }
                OpKind::Embedding { indices, .. } => {
                    let table = node.inputs[0];
                    let gt = embedding_bwd(&g_out, indices, self.graph.shape(table));
                    accumulate(&mut grads, table, gt);
                }
                OpKind::GatherLast { indices } => {
                    let x = node.inputs[0];
                    let gx = gather_last_bwd(&g_out, indices, self.graph.shape(x));
                    accumulate(&mut grads, x, gx);
                }
                OpKind::Reshape => {
                    let x = node.inputs[0];
                    let gx = Tensor::from_raw(self.graph.shape(x).to_vec(), g_out.data().to_vec());
                    accumulate(&mut grads, x, gx);
                }
                OpKind::Permute { axes } => {
                    let inv = inverse_permutation(axes);
                    accumulate(&mut grads, node.inputs[0], permute_fwd(&g_out, &inv));
                }
                OpKind::Slice { axis, start, .. } => {
                    let x = node.inputs[0];
                    let gx = slice_bwd(&g_out, *axis, *start, self.graph.shape(x));
                    accumulate(&mut grads, x, gx);
                }
                OpKind::Concat { axis } => {
                    let mut offset = 0usize;
                    for &inp in &node.inputs {
                        let len = self.graph.shape(inp)[*axis];
                        let gi = slice_fwd(&g_out, *axis, offset, offset + len);
                        accumulate(&mut grads, inp, gi);
                        offset += len;
                    }
                }
                OpKind::SumAxis { axis } => {
                    let x = node.inputs[0];
                    let gx = expand_axis(&g_out, *axis, self.graph.shape(x), T::one());
                    accumulate(&mut grads, x, gx);
                }
                OpKind::MeanAxis { axis } => {
                    let x = node.inputs[0];
                    let n = T::from_f64(self.graph.shape(x)[*axis] as f64);
                    let gx = expand_axis(&g_out, *axis, self.graph.shape(x), T::one() / n);
                    accumulate(&mut grads, x, gx);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), g.shape());
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

// ---- scalar nonlinearities ------------------------------------------------

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

// ---- elementwise kernels ----------------------------------------------------

fn map_op<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_raw(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn zip_op<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_raw(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Strides for indexing `shape` from coordinates of `out_shape`
/// (right-aligned; broadcast axes get stride 0).
fn effective_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let real = strides_of(shape);
    let mut eff = vec![0usize; out_shape.len()];
    let off = out_shape.len() - shape.len();
    for (i, (&d, &s)) in shape.iter().zip(real.iter()).enumerate() {
        eff[off + i] = if d == 1 { 0 } else { s };
    }
    eff
}

fn bin_op<T: Real>(a: &Tensor<T>, b: &Tensor<T>, out_shape: &[usize], f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        return Tensor::from_raw(
            out_shape.to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        );
    }
    let n: usize = out_shape.iter().product();
    let sa = effective_strides(a.shape(), out_shape);
    let sb = effective_strides(b.shape(), out_shape);
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; out_shape.len()];
    let (mut off_a, mut off_b) = (0usize, 0usize);
    let ad = a.data();
    let bd = b.data();
    for _ in 0..n {
        out.push(f(ad[off_a], bd[off_b]));
        for ax in (0..out_shape.len()).rev() {
            coords[ax] += 1;
            off_a += sa[ax];
            off_b += sb[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            coords[ax] = 0;
            off_a -= sa[ax] * out_shape[ax];
            off_b -= sb[ax] * out_shape[ax];
        }
    }
    Tensor::from_raw(out_shape.to_vec(), out)
}

/// Sum-reduces `g` onto `target` shape (inverse of broadcasting), in
/// ascending index order.
fn reduce_to_shape<T: Real>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let mut out = Tensor::zeros(target);
    let st = effective_strides(target, g.shape());
    let gshape = g.shape().to_vec();
    let mut coords = vec![0usize; gshape.len()];
    let mut off_t = 0usize;
    let od = out.data_mut();
    for &v in g.data() {
        od[off_t] += v;
        for ax in (0..gshape.len()).rev() {
            coords[ax] += 1;
            off_t += st[ax];
            if coords[ax] < gshape[ax] {
                break;
            }
            coords[ax] = 0;
            off_t -= st[ax] * gshape[ax];
        }
    }
    out
}

// ---- matmul ------------------------------------------------------------

pub(crate) fn matmul_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut shape = broadcast_shapes(&a[..a.len() - 2], &b[..b.len() - 2]).expect("matmul batch");
    shape.push(a[a.len() - 2]);
    shape.push(b[b.len() - 1]);
    shape
}

pub(crate) fn matmul_fwd<T: Real>(a: &Tensor<T>, b: &Tensor<T>, out_shape: &[usize]) -> Tensor<T> {
    let sa = a.shape();
    let sb = b.shape();
    let (n, m) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let k = sb[sb.len() - 1];
    let batch_shape = &out_shape[..out_shape.len() - 2];
    let batch_n: usize = batch_shape.iter().product();

    let sa_batch = effective_strides(&sa[..sa.len() - 2], batch_shape);
    let sb_batch = effective_strides(&sb[..sb.len() - 2], batch_shape);

    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); batch_n * n * k];

    let mut coords = vec![0usize; batch_shape.len()];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    for bi in 0..batch_n {
        let a_off = base_a * (n * m);
        let b_off = base_b * (m * k);
        let o_off = bi * (n * k);
        for i in 0..n {
            let arow = &ad[a_off + i * m..a_off + (i + 1) * m];
            let orow = &mut out[o_off + i * k..o_off + (i + 1) * k];
            for (p, &aip) in arow.iter().enumerate() {
                let brow = &bd[b_off + p * k..b_off + (p + 1) * k];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += aip * bv;
                }
            }
        }
        for ax in (0..batch_shape.len()).rev() {
            coords[ax] += 1;
            base_a += sa_batch[ax];
            base_b += sb_batch[ax];
            if coords[ax] < batch_shape[ax] {
                break;
            }
            coords[ax] = 0;
            base_a -= sa_batch[ax] * batch_shape[ax];
            base_b -= sb_batch[ax] * batch_shape[ax];
        }
    }
    Tensor::from_raw(out_shape.to_vec(), out)
}

/// Swaps the last two axes.
fn transpose_last<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let nd = s.len();
    let mut axes: Vec<usize> = (0..nd).collect();
    axes.swap(nd - 1, nd - 2);
    permute_fwd(x, &axes)
}

// ---- last-axis kernels ---------------------------------------------------

fn softmax_fwd<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().unwrap();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().cloned().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    Tensor::from_raw(x.shape().to_vec(), out)
}

fn softmax_bwd<T: Real>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let d = *y.shape().last().unwrap();
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
        let dot: T = yr.iter().zip(gr).map(|(&s, &gv)| s * gv).sum();
        out.extend(yr.iter().zip(gr).map(|(&s, &gv)| s * (gv - dot)));
    }
    Tensor::from_raw(y.shape().to_vec(), out)
}

fn log_softmax_fwd<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().unwrap();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let lse: T = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::from_raw(x.shape().to_vec(), out)
}

fn log_softmax_bwd<T: Real>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let d = *y.shape().last().unwrap();
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
        let gsum: T = gr.iter().cloned().sum();
        out.extend(yr.iter().zip(gr).map(|(&ly, &gv)| gv - ly.exp() * gsum));
    }
    Tensor::from_raw(y.shape().to_vec(), out)
}

fn layer_norm_fwd<T: Real>(x: &Tensor<T>, eps: f64) -> Tensor<T> {
    let d = *x.shape().last().unwrap();
    let nd = T::from_f64(d as f64);
    let eps = T::from_f64(eps);
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let mean: T = row.iter().cloned().sum::<T>() / nd;
        let var: T = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nd;
        let inv = T::one() / (var + eps).sqrt();
        out.extend(row.iter().map(|&v| (v - mean) * inv));
    }
    Tensor::from_raw(x.shape().to_vec(), out)
}

fn layer_norm_bwd<T: Real>(x: &Tensor<T>, g: &Tensor<T>, eps: f64) -> Tensor<T> {
    let d = *x.shape().last().unwrap();
    let nd = T::from_f64(d as f64);
    let eps = T::from_f64(eps);
    let mut out = Vec::with_capacity(x.len());
    for (row, gr) in x.data().chunks(d).zip(g.data().chunks(d)) {
        let mean: T = row.iter().cloned().sum::<T>() / nd;
        let var: T = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nd;
        let inv = T::one() / (var + eps).sqrt();
        let xhat: Vec<T> = row.iter().map(|&v| (v - mean) * inv).collect();
        let g_mean: T = gr.iter().cloned().sum::<T>() / nd;
        let gx_mean: T = gr.iter().zip(&xhat).map(|(&gv, &h)| gv * h).sum::<T>() / nd;
        out.extend(
            gr.iter()
                .zip(&xhat)
                .map(|(&gv, &h)| inv * (gv - g_mean - h * gx_mean)),
        );
    }
    Tensor::from_raw(x.shape().to_vec(), out)
}

// ---- gather / layout kernels ----------------------------------------------

fn embedding_fwd<T: Real>(table: &Tensor<T>, indices: &[usize], out_shape: &[usize]) -> Tensor<T> {
    let d = table.shape()[1];
    let mut out = Vec::with_capacity(indices.len() * d);
    for &idx in indices {
        out.extend_from_slice(&table.data()[idx * d..(idx + 1) * d]);
    }
    Tensor::from_raw(out_shape.to_vec(), out)
}

fn embedding_bwd<T: Real>(g: &Tensor<T>, indices: &[usize], table_shape: &[usize]) -> Tensor<T> {
    let d = table_shape[1];
    let mut out = Tensor::zeros(table_shape);
    let od = out.data_mut();
    for (r, &idx) in indices.iter().enumerate() {
        let grow = &g.data()[r * d..(r + 1) * d];
        for (o, &gv) in od[idx * d..(idx + 1) * d].iter_mut().zip(grow) {
            *o += gv;
        }
    }
    out
}

fn gather_last_fwd<T: Real>(x: &Tensor<T>, indices: &[usize]) -> Tensor<T> {
    let d = *x.shape().last().unwrap();
    let out = indices
        .iter()
        .enumerate()
        .map(|(r, &idx)| x.data()[r * d + idx])
        .collect();
    Tensor::from_raw(x.shape()[..x.ndim() - 1].to_vec(), out)
}

fn gather_last_bwd<T: Real>(g: &Tensor<T>, indices: &[usize], x_shape: &[usize]) -> Tensor<T> {
    let d = *x_shape.last().unwrap();
    let mut out = Tensor::zeros(x_shape);
    let od = out.data_mut();
    for (r, (&idx, &gv)) in indices.iter().zip(g.data()).enumerate() {
        od[r * d + idx] += gv;
    }
    out
}

fn permute_fwd<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let sx = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| sx[a]).collect();
    let in_strides = strides_of(sx);
    let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    let xd = x.data();
    for _ in 0..n {
        out.push(xd[off]);
        for ax in (0..out_shape.len()).rev() {
            coords[ax] += 1;
            off += perm_strides[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            coords[ax] = 0;
            off -= perm_strides[ax] * out_shape[ax];
        }
    }
    Tensor::from_raw(out_shape, out)
}

fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn slice_fwd<T: Real>(x: &Tensor<T>, axis: usize, start: usize, end: usize) -> Tensor<T> {
    let sx = x.shape();
    let outer: usize = sx[..axis].iter().product();
    let inner: usize = sx[axis + 1..].iter().product();
    let len = end - start;
    let mut out = Vec::with_capacity(outer * len * inner);
    let xd = x.data();
    for o in 0..outer {
        let base = (o * sx[axis] + start) * inner;
        out.extend_from_slice(&xd[base..base + len * inner]);
    }
    let mut shape = sx.to_vec();
    shape[axis] = len;
    Tensor::from_raw(shape, out)
}

fn slice_bwd<T: Real>(g: &Tensor<T>, axis: usize, start: usize, x_shape: &[usize]) -> Tensor<T> {
    let outer: usize = x_shape[..axis].iter().product();
    let inner: usize = x_shape[axis + 1..].iter().product();
    let len = g.shape()[axis];
    let mut out = Tensor::zeros(x_shape);
    let od = out.data_mut();
    let gd = g.data();
    for o in 0..outer {
        let src = o * len * inner;
        let dst = (o * x_shape[axis] + start) * inner;
        od[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
    }
    out
}

fn concat_fwd<T: Real>(parts: &[&Tensor<T>], axis: usize, out_shape: &[usize]) -> Tensor<T> {
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis];
            let base = o * len * inner;
            out.extend_from_slice(&p.data()[base..base + len * inner]);
        }
    }
    Tensor::from_raw(out_shape.to_vec(), out)
}

fn reduce_axis<T: Real>(x: &Tensor<T>, axis: usize, mean: bool) -> Tensor<T> {
    let sx = x.shape();
    let outer: usize = sx[..axis].iter().product();
    let len = sx[axis];
    let inner: usize = sx[axis + 1..].iter().product();
    let mut shape = sx.to_vec();
    shape.remove(axis);
    let mut out = vec![T::zero(); outer * inner];
    let xd = x.data();
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            let orow = &mut out[o * inner..(o + 1) * inner];
            for (ov, &xv) in orow.iter_mut().zip(&xd[base..base + inner]) {
                *ov += xv;
            }
        }
    }
    if mean {
        let n = T::from_f64(len as f64);
        for v in &mut out {
            *v /= n;
        }
    }
    Tensor::from_raw(shape, out)
}

fn expand_axis<T: Real>(g: &Tensor<T>, axis: usize, x_shape: &[usize], scale: T) -> Tensor<T> {
    let outer: usize = x_shape[..axis].iter().product();
    let len = x_shape[axis];
    let inner: usize = x_shape[axis + 1..].iter().product();
    let gd = g.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let grow = &gd[o * inner..(o + 1) * inner];
        for _ in 0..len {
            out.extend(grow.iter().map(|&v| v * scale));
        }
    }
    Tensor::from_raw(x_shape.to_vec(), out)
}

// ---- numeric differentiation oracle ---------------------------------------

/// Central-difference gradient estimate `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn numeric_gradient<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    h: T,
) -> Result<Tensor<T>> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(numeric(format!(
                "numeric_gradient: non-finite function value at coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (fp - fm) / (T::from_f64(2.0) * h);
    }
    Ok(grad)
}

/// Like [`numeric_gradient`] but with a per-coordinate step
/// `h_i = base * (1 + |x_i|)`.
pub fn numeric_gradient_scaled<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    base: T,
) -> Result<Tensor<T>> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let h = base * (T::one() + orig.abs());
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(numeric(format!(
                "numeric_gradient: non-finite function value at coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (fp - fm) / (T::from_f64(2.0) * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn bind<'a, T: Real>(pairs: &[(&'a str, &'a Tensor<T>)]) -> Bindings<'a, T> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a", &[2, 2]).unwrap();
        let b = g.input("b", &[2, 2]).unwrap();
        let y = g.matmul(a, b).unwrap();
        let ta = Tensor::from_f64_slice(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let tb = Tensor::from_f64_slice(&[2, 2], &[5.0, 6.0, 7.0, 8.0]).unwrap();
        let ev = g.evaluate(&bind(&[("a", &ta), ("b", &tb)])).unwrap();
        assert_eq!(ev.value(y).data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[4]).unwrap();
        let y = g.softmax(x).unwrap();
        let tx = Tensor::zeros(&[4]);
        let ev = g.evaluate(&bind(&[("x", &tx)])).unwrap();
        assert_eq!(ev.value(y).data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn evaluate_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[3, 5]).unwrap();
        let w = g.input("w", &[5, 4]).unwrap();
        let h = g.matmul(x, w).unwrap();
        let h = g.tanh(h).unwrap();
        let y = g.sum_all(h).unwrap();
        let tx = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let tw = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let b = bind(&[("x", &tx), ("w", &tw)]);
        let v1 = g.evaluate(&b).unwrap().value(y).item().unwrap();
        let v2 = g.evaluate(&b).unwrap().value(y).item().unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
    }

    /// Three-layer MLP against an independent straight-line forward pass.
    #[test]
    fn mlp_matches_straight_line_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let dims = [4usize, 6, 5, 3];
        let x = Tensor::<f64>::randn(&[2, dims[0]], 1.0, &mut rng);
        let ws: Vec<Tensor<f64>> = (0..3)
            .map(|i| Tensor::randn(&[dims[i], dims[i + 1]], 0.5, &mut rng))
            .collect();

        let mut g = Graph::<f64>::new();
        let xin = g.input("x", &[2, dims[0]]).unwrap();
        let mut cur = xin;
        let mut names = Vec::new();
        for (i, w) in ws.iter().enumerate() {
            let name = format!("w{i}");
            let wid = g.input(&name, w.shape()).unwrap();
            names.push(name);
            cur = g.matmul(cur, wid).unwrap();
            if i < 2 {
                cur = g.tanh(cur).unwrap();
            }
        }
        let mut b = Bindings::new();
        b.insert("x", &x);
        for (name, w) in names.iter().zip(&ws) {
            b.insert(name, w);
        }
        let ev = g.evaluate(&b).unwrap();
        let got = ev.value(cur);

        // straight-line re-implementation
        let mut h = x.to_f64_vec();
        let mut rows = 2usize;
        for (i, w) in ws.iter().enumerate() {
            let (m, n) = (w.shape()[0], w.shape()[1]);
            let mut next = vec![0.0f64; rows * n];
            for r in 0..rows {
                for c in 0..n {
                    let mut acc = 0.0;
                    for p in 0..m {
                        acc += h[r * m + p] * w.data()[p * n + c];
                    }
                    next[r * n + c] = if i < 2 { acc.tanh() } else { acc };
                }
            }
            h = next;
            rows = 2;
        }
        for (a, b) in got.data().iter().zip(&h) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn linear_loss_gradient_is_outer_product() {
        // loss = sum(x . W); dLoss/dW = x^T . ones  (outer-product structure)
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[2, 3]).unwrap();
        let w = g.input("w", &[3, 2]).unwrap();
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum_all(y).unwrap();
        let tx = Tensor::from_f64_slice(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let tw = Tensor::from_f64_slice(&[3, 2], &[0.1; 6]).unwrap();
        let ev = g.evaluate(&bind(&[("x", &tx), ("w", &tw)])).unwrap();
        let grads = ev.gradient(loss, &[w]).unwrap();
        // column sums of x, repeated for each output column
        assert_eq!(grads[0].data(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn unused_param_gets_exact_zeros() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[3]).unwrap();
        let w = g.input("unused", &[2, 2]).unwrap();
        let loss = g.sum_all(x).unwrap();
        let tx = Tensor::ones(&[3]);
        let tw = Tensor::ones(&[2, 2]);
        let ev = g.evaluate(&bind(&[("x", &tx), ("unused", &tw)])).unwrap();
        let grads = ev.gradient(loss, &[w]).unwrap();
        assert_eq!(grads[0], Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[3]).unwrap();
        let ev_in = Tensor::ones(&[3]);
        let ev = g.evaluate(&bind(&[("x", &ev_in)])).unwrap();
        assert!(ev.gradient(x, &[x]).is_err());
    }

    #[test]
    fn finite_difference_agreement_on_random_graphs() {
        for seed in 0..20u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut g = Graph::<f64>::new();
            let x = g.input("x", &[3, 4]).unwrap();
            let w1 = g.input("w1", &[4, 4]).unwrap();
            let w2 = g.input("w2", &[4, 2]).unwrap();
            let h = g.matmul(x, w1).unwrap();
            let h = match seed % 4 {
                0 => g.tanh(h).unwrap(),
                1 => g.silu(h).unwrap(),
                2 => g.gelu(h).unwrap(),
                _ => g.layer_norm(h, 1e-6).unwrap(),
            };
            let h = g.matmul(h, w2).unwrap();
            let h = g.log_softmax(h).unwrap();
            let loss = g.mean_all(h).unwrap();

            let tx = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let tw1 = Tensor::randn(&[4, 4], 0.7, &mut rng);
            let tw2 = Tensor::randn(&[4, 2], 0.7, &mut rng);

            let ev = g
                .evaluate(&bind(&[("x", &tx), ("w1", &tw1), ("w2", &tw2)]))
                .unwrap();
            let analytic = &ev.gradient(loss, &[w1]).unwrap()[0];

            let f = |w: &Tensor<f64>| -> crate::error::Result<f64> {
                let ev = g.evaluate(&bind(&[("x", &tx), ("w1", w), ("w2", &tw2)]))?;
                ev.value(loss).item()
            };
            let fd = numeric_gradient_scaled(f, &tw1, 1e-5).unwrap();
            for (a, n) in analytic.data().iter().zip(fd.data()) {
                let denom = a.abs().max(n.abs()).max(1.0);
                assert!(
                    (a - n).abs() / denom < 1e-5,
                    "seed {seed}: analytic {a} vs fd {n}"
                );
            }
        }
    }

    #[test]
    fn per_sample_matches_loop_of_singles() {
        let b = 4usize;
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let tx = Tensor::<f64>::randn(&[b, 5], 1.0, &mut rng);
        let tw = Tensor::<f64>::randn(&[5, 3], 0.5, &mut rng);

        let build = |batch: usize| -> (Graph<f64>, NodeId, NodeId, NodeId) {
            let mut g = Graph::<f64>::with_batch(batch);
            let x = g.batch_input("x", &[batch, 5]).unwrap();
            let w = g.input("w", &[5, 3]).unwrap();
            let h = g.matmul(x, w).unwrap();
            let h = g.silu(h).unwrap();
            let per = g.mean_axis(h, 1).unwrap();
            (g, per, w, x)
        };

        let (g, per, w, _) = build(b);
        let ev = g.evaluate(&bind(&[("x", &tx), ("w", &tw)])).unwrap();
        let batched = ev.per_sample_gradients(per, &[w]).unwrap();

        for i in 0..b {
            let row = Tensor::from_f64_slice(&[1, 5], &tx.to_f64_vec()[i * 5..(i + 1) * 5]).unwrap();
            let (g1, per1, w1, _) = build(1);
            let ev1 = g1.evaluate(&bind(&[("x", &row), ("w", &tw)])).unwrap();
            let single = ev1.per_sample_gradients(per1, &[w1]).unwrap();
            let diff = batched[i][0].max_abs_diff(&single[0][0]);
            assert!(diff < 1e-10, "sample {i}: diff {diff}");
        }
    }

    #[test]
    fn batch_of_one_equals_full_gradient() {
        let mut g = Graph::<f64>::with_batch(1);
        let x = g.batch_input("x", &[1, 3]).unwrap();
        let w = g.input("w", &[3, 2]).unwrap();
        let h = g.matmul(x, w).unwrap();
        let per = g.mean_axis(h, 1).unwrap();
        let loss = g.mean_axis(per, 0).unwrap();

        let tx = Tensor::from_f64_slice(&[1, 3], &[1.0, -2.0, 0.5]).unwrap();
        let tw = Tensor::from_f64_slice(&[3, 2], &[0.3, -0.1, 0.2, 0.4, -0.6, 0.9]).unwrap();
        let ev = g.evaluate(&bind(&[("x", &tx), ("w", &tw)])).unwrap();
        let per_sample = ev.per_sample_gradients(per, &[w]).unwrap();
        let full = ev.gradient(loss, &[w]).unwrap();
        assert_eq!(per_sample[0][0], full[0]);
    }

    #[test]
    fn duplicated_example_yields_identical_gradients() {
        let mut g = Graph::<f64>::with_batch(2);
        let x = g.batch_input("x", &[2, 4]).unwrap();
        let w = g.input("w", &[4, 3]).unwrap();
        let h = g.matmul(x, w).unwrap();
        let h = g.tanh(h).unwrap();
        let per = g.mean_axis(h, 1).unwrap();

        let row = [0.5, -1.0, 2.0, 0.1];
        let mut data = row.to_vec();
        data.extend_from_slice(&row);
        let tx = Tensor::from_f64_slice(&[2, 4], &data).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let tw = Tensor::randn(&[4, 3], 0.5, &mut rng);
        let ev = g.evaluate(&bind(&[("x", &tx), ("w", &tw)])).unwrap();
        let per_sample = ev.per_sample_gradients(per, &[w]).unwrap();
        assert_eq!(per_sample[0][0], per_sample[1][0]);
    }

    #[test]
    fn per_sample_on_coupled_loss_is_contract_error() {
        let mut g = Graph::<f64>::with_batch(2);
        let x = g.batch_input("x", &[2, 3]).unwrap();
        // cross-example mean sneaks batch statistics into each entry
        let m = g.mean_axis(x, 0).unwrap();
        let mixed = g.add(x, m).unwrap();
        let per = g.mean_axis(mixed, 1).unwrap();
        let tx = Tensor::ones(&[2, 3]);
        let ev = g.evaluate(&bind(&[("x", &tx)])).unwrap();
        assert!(ev.per_sample_gradients(per, &[x]).is_err());
    }

    #[test]
    fn numeric_gradient_quadratic() {
        let x = Tensor::from_f64_slice(&[1], &[3.0]).unwrap();
        let g = numeric_gradient(
            |t: &Tensor<f64>| Ok(t.data()[0] * t.data()[0]),
            &x,
            1e-5,
        )
        .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn numeric_gradient_constant_is_zero() {
        let x = Tensor::from_f64_slice(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let g = numeric_gradient(|_t: &Tensor<f64>| Ok(7.5), &x, 1e-5).unwrap();
        assert_eq!(g, Tensor::zeros(&[3]));
    }

    #[test]
    fn mean_consistency_per_sample_vs_mean_loss() {
        let b = 3usize;
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mut g = Graph::<f64>::with_batch(b);
        let x = g.batch_input("x", &[b, 4]).unwrap();
        let w = g.input("w", &[4, 4]).unwrap();
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h).unwrap();
        let per = g.mean_axis(h, 1).unwrap();
        let loss = g.mean_axis(per, 0).unwrap();

        let tx = Tensor::randn(&[b, 4], 1.0, &mut rng);
        let tw = Tensor::randn(&[4, 4], 0.5, &mut rng);
        let ev = g.evaluate(&bind(&[("x", &tx), ("w", &tw)])).unwrap();
        let per_sample = ev.per_sample_gradients(per, &[w]).unwrap();
        let full = &ev.gradient(loss, &[w]).unwrap()[0];

        let mut mean = Tensor::<f64>::zeros(&[4, 4]);
        for gs in &per_sample {
            for (m, v) in mean.data_mut().iter_mut().zip(gs[0].data()) {
                *m += v / b as f64;
            }
        }
        assert!(mean.max_abs_diff(full) < 1e-9);
    }

    #[test]
    fn missing_binding_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let _ = g.input("x", &[2]).unwrap();
        let err = match g.evaluate(&Bindings::new()) {
            Err(e) => e,
            Ok(_) => panic!("expected missing-binding error"),
        };
        assert!(err.to_string().contains("input 'x'"));
    }
}
