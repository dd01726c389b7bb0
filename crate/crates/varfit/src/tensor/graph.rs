//! Symbolic computation graph.
//!
//! Nodes are appended in topological order by construction: every builder
//! method takes already-existing [`NodeId`]s, so the node list is acyclic and
//! a single forward sweep evaluates it. Graphs are immutable once built and
//! evaluation takes `&self`, so concurrent evaluations of one graph are safe.
//!
//! The graph tracks which nodes are per-example ("batched", leading axis =
//! declared batch size). Operations that mix information across the batch
//! axis mark their result as coupled; per-sample gradients refuse coupled
//! losses. There is deliberately no cross-example normalization primitive:
//! `layer_norm` and `softmax` act on the last axis only.

use std::collections::{BTreeMap, HashMap};

use crate::error::{contract, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

/// Named tensors bound to graph inputs at evaluation time.
pub type Bindings<'a, T> = HashMap<&'a str, &'a Tensor<T>>;

#[derive(Debug, Clone)]
pub(crate) enum OpKind<T: Real> {
    Input(String),
    Constant(Tensor<T>),
    Add,
    Sub,
    Mul,
    Neg,
    Scale(T),
    AddScalar(T),
    Relu,
    Tanh,
    Silu,
    Gelu,
    MatMul,
    SoftmaxLast,
    LogSoftmaxLast,
    LayerNormLast { eps: f64 },
    /// Gathers rows of the single input (the table) at constant indices.
    Embedding { indices: Vec<usize> },
    /// Picks one element along the last axis per leading position.
    GatherLast { indices: Vec<usize> },
    Reshape,
    Permute { axes: Vec<usize> },
    Slice { axis: usize, start: usize, end: usize },
    Concat { axis: usize },
    SumAxis { axis: usize },
    MeanAxis { axis: usize },
}

impl<T: Real> OpKind<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            OpKind::Input(_) => "input",
            OpKind::Constant(_) => "const",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Neg => "neg",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Silu => "silu",
            OpKind::Gelu => "gelu",
            OpKind::MatMul => "matmul",
            OpKind::SoftmaxLast => "softmax",
            OpKind::LogSoftmaxLast => "log_softmax",
            OpKind::LayerNormLast { .. } => "layer_norm",
            OpKind::Embedding { .. } => "embedding",
            OpKind::GatherLast { .. } => "gather_last",
            OpKind::Reshape => "reshape",
            OpKind::Permute { .. } => "permute",
            OpKind::Slice { .. } => "slice",
            OpKind::Concat { .. } => "concat",
            OpKind::SumAxis { .. } => "sum_axis",
            OpKind::MeanAxis { .. } => "mean_axis",
        }
    }
}

pub(crate) struct NodeInfo<T: Real> {
    pub op: OpKind<T>,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    pub batched: bool,
    pub coupled: bool,
}

/// A recorded forward computation over named inputs.
pub struct Graph<T: Real> {
    pub(crate) nodes: Vec<NodeInfo<T>>,
    pub(crate) inputs_by_name: BTreeMap<String, NodeId>,
    pub(crate) batch: Option<usize>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            inputs_by_name: BTreeMap::new(),
            batch: None,
        }
    }

    /// Graph whose batched inputs carry `batch` examples along axis 0.
    pub fn with_batch(batch: usize) -> Self {
        Self {
            nodes: Vec::new(),
            inputs_by_name: BTreeMap::new(),
            batch: Some(batch),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn batch(&self) -> Option<usize> {
        self.batch
    }

    /// True when the node's leading axis enumerates batch examples.
    pub fn is_batched(&self, id: NodeId) -> bool {
        self.nodes[id.0].batched
    }

    /// True when the node's value mixes information across examples.
    pub fn is_coupled(&self, id: NodeId) -> bool {
        self.nodes[id.0].coupled
    }

    pub(crate) fn label(&self, id: NodeId) -> String {
        match &self.nodes[id.0].op {
            OpKind::Input(name) => format!("input '{name}'#{}", id.0),
            op => format!("{}#{}", op.name(), id.0),
        }
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs_by_name.get(name).copied()
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs_by_name.keys().map(|s| s.as_str())
    }

    fn push(
        &mut self,
        op: OpKind<T>,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        batched: bool,
        coupled: bool,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(NodeInfo {
            op,
            inputs,
            shape,
            batched,
            coupled,
        });
        id
    }

    fn check_ids(&self, ids: &[NodeId], what: &str) -> Result<()> {
        for id in ids {
            if id.0 >= self.nodes.len() {
                return Err(contract(format!("{what}: node {} does not exist", id.0)));
            }
        }
        Ok(())
    }

    fn flags(&self, ids: &[NodeId]) -> (bool, bool) {
        let batched = ids.iter().any(|&i| self.nodes[i.0].batched);
        let coupled = ids.iter().any(|&i| self.nodes[i.0].coupled);
        (batched, coupled)
    }

    // ---- leaves ------------------------------------------------------

    /// Declares a named input of fixed shape, bound at evaluation time.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.declare_input(name, shape, false)
    }

    /// Named input whose leading axis is the batch axis.
    pub fn batch_input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        let b = self
            .batch
            .ok_or_else(|| contract("batch_input on a graph without a declared batch size"))?;
        if shape.first() != Some(&b) {
            return Err(contract(format!(
                "batch_input '{name}': shape {shape:?} must have leading dim {b}"
            )));
        }
        self.declare_input(name, shape, true)
    }

    fn declare_input(&mut self, name: &str, shape: &[usize], batched: bool) -> Result<NodeId> {
        if self.inputs_by_name.contains_key(name) {
            return Err(contract(format!("duplicate input name '{name}'")));
        }
        let id = self.push(OpKind::Input(name.to_string()), vec![], shape.to_vec(), batched, false);
        self.inputs_by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(OpKind::Constant(value), vec![], shape, false, false)
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, op: OpKind<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_ids(&[a, b], op.name())?;
        let shape = broadcast_shapes(&self.nodes[a.0].shape, &self.nodes[b.0].shape)
            .ok_or_else(|| {
                contract(format!(
                    "{} of {} {:?} with {} {:?}: shapes not broadcastable",
                    op.name(),
                    self.label(a),
                    self.nodes[a.0].shape,
                    self.label(b),
                    self.nodes[b.0].shape
                ))
            })?;
        let (batched, coupled) = self.flags(&[a, b]);
        Ok(self.push(op, vec![a, b], shape, batched, coupled))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(OpKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(OpKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(OpKind::Mul, a, b)
    }

    fn unary(&mut self, op: OpKind<T>, x: NodeId) -> Result<NodeId> {
        self.check_ids(&[x], op.name())?;
        let shape = self.nodes[x.0].shape.clone();
        let (batched, coupled) = self.flags(&[x]);
        Ok(self.push(op, vec![x], shape, batched, coupled))
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Neg, x)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.unary(OpKind::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.unary(OpKind::AddScalar(c), x)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Relu, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Tanh, x)
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Silu, x)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Gelu, x)
    }

    // ---- matmul ------------------------------------------------------

    /// Matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_ids(&[a, b], "matmul")?;
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() < 2 || sb.len() < 2 {
            return Err(contract(format!(
                "matmul of {} {:?} with {} {:?}: operands must have rank >= 2",
                self.label(a),
                sa,
                self.label(b),
                sb
            )));
        }
        let (n, m1) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (m2, k) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if m1 != m2 {
            return Err(contract(format!(
                "matmul of {} {:?} with {} {:?}: inner dimensions {m1} vs {m2}",
                self.label(a),
                sa,
                self.label(b),
                sb
            )));
        }
        let batch = broadcast_shapes(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).ok_or_else(|| {
            contract(format!(
                "matmul of {} {:?} with {} {:?}: leading dims not broadcastable",
                self.label(a),
                sa,
                self.label(b),
                sb
            ))
        })?;
        let mut shape = batch;
        shape.push(n);
        shape.push(k);
        let (batched, coupled) = self.flags(&[a, b]);
        Ok(self.push(OpKind::MatMul, vec![a, b], shape, batched, coupled))
    }

    // ---- last-axis ops -----------------------------------------------

    fn last_axis(&mut self, op: OpKind<T>, x: NodeId) -> Result<NodeId> {
        self.check_ids(&[x], op.name())?;
        if self.nodes[x.0].shape.is_empty() {
            return Err(contract(format!(
                "{} on rank-0 node {}",
                op.name(),
                self.label(x)
            )));
        }
        self.unary(op, x)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.last_axis(OpKind::SoftmaxLast, x)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.last_axis(OpKind::LogSoftmaxLast, x)
    }

    /// Per-position layer norm over the last axis, without affine terms.
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        self.last_axis(OpKind::LayerNormLast { eps }, x)
    }

    // ---- gather / scatter --------------------------------------------

    /// Looks up rows of `table` (shape `[v, d]`) at constant `indices`,
    /// producing shape `prefix ++ [d]`. `batched` declares whether
    /// `prefix[0]` is the batch axis.
    pub fn embedding(
        &mut self,
        table: NodeId,
        indices: Vec<usize>,
        prefix: Vec<usize>,
        batched: bool,
    ) -> Result<NodeId> {
        self.check_ids(&[table], "embedding")?;
        let st = &self.nodes[table.0].shape;
        if st.len() != 2 {
            return Err(contract(format!(
                "embedding table {} must be rank 2, got {:?}",
                self.label(table),
                st
            )));
        }
        let count: usize = prefix.iter().product();
        if count != indices.len() {
            return Err(contract(format!(
                "embedding: prefix {:?} implies {} indices, got {}",
                prefix,
                count,
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= st[0]) {
            return Err(contract(format!(
                "embedding index {bad} out of range for table with {} rows",
                st[0]
            )));
        }
        if batched {
            let b = self
                .batch
                .ok_or_else(|| contract("batched embedding on graph without batch size"))?;
            if prefix.first() != Some(&b) {
                return Err(contract(format!(
                    "batched embedding: prefix {prefix:?} must have leading dim {b}"
                )));
            }
        }
        let mut shape = prefix.clone();
        shape.push(st[1]);
        let coupled = self.nodes[table.0].coupled;
        Ok(self.push(
            OpKind::Embedding { indices },
            vec![table],
            shape,
            batched,
            coupled,
        ))
    }

    /// Selects `x[..., indices[r]]` for each leading position `r`,
    /// removing the last axis.
    pub fn gather_last(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.check_ids(&[x], "gather_last")?;
        let sx = &self.nodes[x.0].shape;
        if sx.is_empty() {
            return Err(contract("gather_last on rank-0 node"));
        }
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let last = sx[sx.len() - 1];
        if rows != indices.len() {
            return Err(contract(format!(
                "gather_last on {} {:?}: expected {} indices, got {}",
                self.label(x),
                sx,
                rows,
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= last) {
            return Err(contract(format!(
                "gather_last index {bad} out of range for last dim {last}"
            )));
        }
        let shape = sx[..sx.len() - 1].to_vec();
        let (batched, coupled) = self.flags(&[x]);
        Ok(self.push(OpKind::GatherLast { indices }, vec![x], shape, batched, coupled))
    }

    // ---- layout ------------------------------------------------------

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check_ids(&[x], "reshape")?;
        let sx = &self.nodes[x.0].shape;
        let n: usize = sx.iter().product();
        let m: usize = shape.iter().product();
        if n != m {
            return Err(contract(format!(
                "reshape {} {:?} -> {:?}: element count {n} vs {m}",
                self.label(x),
                sx,
                shape
            )));
        }
        let preserved = !self.nodes[x.0].batched
            || (!sx.is_empty() && !shape.is_empty() && sx[0] == shape[0]);
        let batched = self.nodes[x.0].batched && preserved;
        let coupled = self.nodes[x.0].coupled || (self.nodes[x.0].batched && !preserved);
        Ok(self.push(OpKind::Reshape, vec![x], shape.to_vec(), batched, coupled))
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.check_ids(&[x], "permute")?;
        let sx = &self.nodes[x.0].shape;
        let mut seen = vec![false; sx.len()];
        if axes.len() != sx.len() || axes.iter().any(|&a| a >= sx.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(contract(format!(
                "permute {} {:?} with axes {:?}: not a permutation",
                self.label(x),
                sx,
                axes
            )));
        }
        let shape: Vec<usize> = axes.iter().map(|&a| sx[a]).collect();
        let preserves_batch = axes.first() == Some(&0);
        let batched = self.nodes[x.0].batched && preserves_batch;
        let coupled = self.nodes[x.0].coupled || (self.nodes[x.0].batched && !preserves_batch);
        Ok(self.push(
            OpKind::Permute { axes: axes.to_vec() },
            vec![x],
            shape,
            batched,
            coupled,
        ))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.check_ids(&[x], "slice")?;
        let sx = &self.nodes[x.0].shape;
        if axis >= sx.len() || start >= end || end > sx[axis] {
            return Err(contract(format!(
                "slice {} {:?} axis {axis} range {start}..{end}: out of bounds",
                self.label(x),
                sx
            )));
        }
        let mut shape = sx.clone();
        shape[axis] = end - start;
        let on_batch_axis = axis == 0 && self.nodes[x.0].batched;
        let batched = self.nodes[x.0].batched && !on_batch_axis;
        let coupled = self.nodes[x.0].coupled || on_batch_axis;
        Ok(self.push(
            OpKind::Slice { axis, start, end },
            vec![x],
            shape,
            batched,
            coupled,
        ))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(contract("concat of zero nodes"));
        }
        self.check_ids(xs, "concat")?;
        let first = self.nodes[xs[0].0].shape.clone();
        if axis >= first.len() {
            return Err(contract(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut total = 0usize;
        for &x in xs {
            let s = &self.nodes[x.0].shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(contract(format!(
                    "concat: {} shape {:?} incompatible with {:?} along axis {axis}",
                    self.label(x),
                    s,
                    first
                )));
            }
            total += s[axis];
        }
        let mut shape = first;
        shape[axis] = total;
        let (any_batched, any_coupled) = self.flags(xs);
        let on_batch_axis = axis == 0 && any_batched;
        Ok(self.push(
            OpKind::Concat { axis },
            xs.to_vec(),
            shape,
            any_batched && !on_batch_axis,
            any_coupled || on_batch_axis,
        ))
    }

    // ---- reductions ----------------------------------------------------

    fn reduce(&mut self, op: OpKind<T>, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check_ids(&[x], op.name())?;
        let sx = &self.nodes[x.0].shape;
        if axis >= sx.len() {
            return Err(contract(format!(
                "{} on {} {:?}: axis {axis} out of range",
                op.name(),
                self.label(x),
                sx
            )));
        }
        let mut shape = sx.clone();
        shape.remove(axis);
        let over_batch = axis == 0 && self.nodes[x.0].batched;
        let batched = self.nodes[x.0].batched && !over_batch;
        let coupled = self.nodes[x.0].coupled || over_batch;
        Ok(self.push(op, vec![x], shape, batched, coupled))
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(OpKind::SumAxis { axis }, x, axis)
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(OpKind::MeanAxis { axis }, x, axis)
    }

    /// Reduces all axes to a rank-0 mean.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let mut cur = x;
        while !self.nodes[cur.0].shape.is_empty() {
            cur = self.mean_axis(cur, 0)?;
        }
        Ok(cur)
    }

    /// Reduces all axes to a rank-0 sum.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let mut cur = x;
        while !self.nodes[cur.0].shape.is_empty() {
            cur = self.sum_axis(cur, 0)?;
        }
        Ok(cur)
    }
}

/// Numpy-style broadcast of two shapes; `None` when incompatible.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shapes(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shapes(&[4, 1, 3], &[4, 5, 3]), Some(vec![4, 5, 3]));
        assert_eq!(broadcast_shapes(&[2, 3], &[4]), None);
        assert_eq!(broadcast_shapes(&[], &[2, 2]), Some(vec![2, 2]));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a", &[2, 3]).unwrap();
        let b = g.input("b", &[4, 2]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("input 'a'"), "{msg}");
    }

    #[test]
    fn duplicate_input_rejected() {
        let mut g = Graph::<f32>::new();
        g.input("x", &[1]).unwrap();
        assert!(g.input("x", &[1]).is_err());
    }

    #[test]
    fn batch_tracking_through_ops() {
        let mut g = Graph::<f64>::with_batch(4);
        let x = g.batch_input("x", &[4, 5, 3]).unwrap();
        let w = g.input("w", &[3, 2]).unwrap();
        let y = g.matmul(x, w).unwrap();
        assert!(g.is_batched(y) && !g.is_coupled(y));

        let per_example = g.mean_axis(y, 1).unwrap();
        assert!(g.is_batched(per_example) && !g.is_coupled(per_example));

        let scalar = g.mean_axis(per_example, 0).unwrap();
        assert!(g.is_coupled(scalar));
    }
}
