//! Reverse-mode automatic differentiation over dense f32 tensors.
//!
//! A [`Graph`] is a Wengert list: forward calls append nodes (op descriptor,
//! input ids, computed value), [`Graph::backward`] walks the list in reverse
//! accumulating gradients in construction order, which makes gradient values
//! reproducible run to run. [`Graph::replay_f64`] re-executes the recorded
//! program at 64-bit width for the finite-difference checker, with
//! `stop_gradient` nodes pinned to their recorded values so the replay
//! measures the frozen-input function.

mod gradcheck;
mod ops;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::Op;
pub use tensor::{Real, Tensor};

use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{op}: index out of range: {detail}")]
    IndexOutOfRange { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already run on this graph; call zero_grad first")]
    BackwardTwice,
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a tensor stored in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Value(pub(crate) u32);

struct Node {
    op: Op,
    inputs: Vec<Value>,
    value: Arc<Tensor>,
    /// False for constants and anything downstream of only detached values;
    /// backward neither visits nor targets such nodes.
    requires_grad: bool,
}

/// Recorded computation: values, ops, and (after `backward`) gradients.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    grads_enabled: bool,
    backward_run: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            grads_enabled: true,
            backward_run: false,
        }
    }

    /// Graph that records values but never tracks gradients (inference).
    pub fn inference() -> Self {
        Graph {
            grads_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<Value>, value: Tensor, requires_grad: bool) -> Value {
        self.push_arc(op, inputs, Arc::new(value), requires_grad)
    }

    fn push_arc(
        &mut self,
        op: Op,
        inputs: Vec<Value>,
        value: Arc<Tensor>,
        requires_grad: bool,
    ) -> Value {
        let id = Value(self.nodes.len() as u32);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad: requires_grad && self.grads_enabled,
        });
        self.grads.push(None);
        id
    }

    /// Trainable input. Gradient is accumulated here by `backward`.
    pub fn leaf(&mut self, t: Tensor) -> Value {
        self.push(Op::Leaf, vec![], t, true)
    }

    /// Trainable input sharing storage with the caller.
    pub fn leaf_shared(&mut self, t: Arc<Tensor>) -> Value {
        self.push_arc(Op::Leaf, vec![], t, true)
    }

    /// Non-trainable input: never receives or propagates gradient.
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(Op::Leaf, vec![], t, false)
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Value {
        self.push_arc(Op::Leaf, vec![], t, false)
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0 as usize].value
    }

    pub fn value_arc(&self, v: Value) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0 as usize].value)
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0 as usize].value.shape()
    }

    /// A value is detached when gradient cannot flow through or into it.
    pub fn is_detached(&self, v: Value) -> bool {
        !self.nodes[v.0 as usize].requires_grad
    }

    pub fn grad(&self, v: Value) -> Option<&Tensor> {
        self.grads[v.0 as usize].as_ref()
    }

    /// Move a gradient buffer out of the graph.
    pub fn take_grad(&mut self, v: Value) -> Option<Tensor> {
        self.grads[v.0 as usize].take()
    }

    /// Gradient buffer, materializing zeros for values no gradient reached.
    pub fn grad_or_zeros(&self, v: Value) -> Tensor {
        match &self.grads[v.0 as usize] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shape(v).to_vec()),
        }
    }

    pub fn backward_has_run(&self) -> bool {
        self.backward_run
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_run = false;
    }

    // -- op recording ------------------------------------------------------

    fn record(&mut self, op: Op, inputs: Vec<Value>) -> Value {
        let in_tensors: Vec<&[f32]> = inputs
            .iter()
            .map(|v| self.nodes[v.0 as usize].value.data())
            .collect();
        let in_shapes: Vec<&[usize]> = inputs
            .iter()
            .map(|v| self.nodes[v.0 as usize].value.shape())
            .collect();
        let shape = ops::output_shape(&op, &in_shapes);
        let data = ops::eval::<f32>(&op, &in_tensors, &in_shapes);
        let requires = !matches!(op, Op::StopGradient)
            && inputs
                .iter()
                .any(|v| self.nodes[v.0 as usize].requires_grad);
        self.push(op, inputs, Tensor::new(shape, data), requires)
    }

    fn want_same_shape(&self, op: &'static str, a: Value, b: Value) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.want_same_shape("add", a, b)?;
        Ok(self.record(Op::Add, vec![a, b]))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.want_same_shape("mul", a, b)?;
        Ok(self.record(Op::Mul, vec![a, b]))
    }

    /// `a - b`, composed from `add` and `scale`.
    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.want_same_shape("sub", a, b)?;
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Value, c: f32) -> Value {
        self.record(Op::Scale(c), vec![a])
    }

    pub fn add_scalar(&mut self, a: Value, c: f32) -> Value {
        self.record(Op::AddScalar(c), vec![a])
    }

    pub fn clamp_min(&mut self, a: Value, c: f32) -> Value {
        self.record(Op::ClampMin(c), vec![a])
    }

    pub fn exp(&mut self, a: Value) -> Value {
        self.record(Op::Exp, vec![a])
    }

    pub fn log(&mut self, a: Value) -> Value {
        self.record(Op::Log, vec![a])
    }

    pub fn power(&mut self, a: Value, c: f32) -> Value {
        self.record(Op::Power(c), vec![a])
    }

    pub fn silu(&mut self, a: Value) -> Value {
        self.record(Op::Silu, vec![a])
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        Ok(self.record(Op::Matmul, vec![a, b]))
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value> {
        if self.shape(a).len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                detail: format!("need rank 2, got {:?}", self.shape(a)),
            });
        }
        Ok(self.record(Op::Transpose, vec![a]))
    }

    pub fn reshape(&mut self, a: Value, shape: Vec<usize>) -> Result<Value> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(a), shape),
            });
        }
        Ok(self.record(Op::Reshape(shape), vec![a]))
    }

    pub fn slice_rows(&mut self, a: Value, start: usize, len: usize) -> Result<Value> {
        let s = self.shape(a);
        if s.is_empty() || start + len > s[0] {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_rows",
                detail: format!("rows {start}..{} of {s:?}", start + len),
            });
        }
        Ok(self.record(Op::SliceRows { start, len }, vec![a]))
    }

    pub fn concat_last(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == sb.len()
            && !sa.is_empty()
            && sa[..sa.len() - 1] == sb[..sb.len() - 1];
        if !ok {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_last",
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(self.record(Op::ConcatLast, vec![a, b]))
    }

    /// Row lookup into a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Value, ids: &[u16]) -> Result<Value> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "embedding_lookup",
                detail: format!("table must be rank 2, got {s:?}"),
            });
        }
        let vocab = s[0];
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "embedding_lookup",
                detail: format!("id {bad} >= vocab {vocab}"),
            });
        }
        let ids = ids.iter().map(|&i| i as u32).collect();
        Ok(self.record(Op::Embedding { ids }, vec![table]))
    }

    /// Gather `group` entries per row along the last axis.
    /// `indices.len()` must equal `rows * group`.
    pub fn gather_last(&mut self, a: Value, indices: Vec<u32>, group: usize) -> Result<Value> {
        let s = self.shape(a);
        let last = *s.last().unwrap_or(&0);
        let rows = self.value(a).numel() / last.max(1);
        if s.is_empty() || group == 0 || indices.len() != rows * group {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_last",
                detail: format!(
                    "{} indices for {rows} rows x group {group} of {s:?}",
                    indices.len()
                ),
            });
        }
        if let Some(bad) = indices.iter().find(|&&ix| ix as usize >= last) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "gather_last",
                detail: format!("index {bad} >= last dim {last}"),
            });
        }
        Ok(self.record(Op::GatherLast { indices, group }, vec![a]))
    }

    pub fn softmax(&mut self, a: Value, axis: usize) -> Result<Value> {
        self.check_axis_finite("softmax", a, axis)?;
        Ok(self.record(Op::Softmax { axis }, vec![a]))
    }

    pub fn log_softmax(&mut self, a: Value, axis: usize) -> Result<Value> {
        self.check_axis_finite("log_softmax", a, axis)?;
        Ok(self.record(Op::LogSoftmax { axis }, vec![a]))
    }

    fn check_axis_finite(&self, op: &'static str, a: Value, axis: usize) -> Result<()> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!("axis {axis} of {s:?}"),
            });
        }
        if !self.value(a).is_finite() {
            return Err(AutodiffError::NonFinite { op });
        }
        Ok(())
    }

    pub fn sum(&mut self, a: Value) -> Value {
        self.record(Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: Value) -> Value {
        self.record(Op::Mean, vec![a])
    }

    /// RMS normalization over the last axis with a learned gain vector.
    pub fn rms_norm(&mut self, a: Value, gain: Value, eps: f32) -> Result<Value> {
        let last = self.value(a).last_dim();
        let gs = self.shape(gain);
        if gs != [last] {
            return Err(AutodiffError::ShapeMismatch {
                op: "rms_norm",
                detail: format!("gain {gs:?} for last dim {last}"),
            });
        }
        Ok(self.record(Op::RmsNorm { eps }, vec![a, gain]))
    }

    /// Rotary position embedding; positions are `0..t` over axis 0.
    pub fn rope(&mut self, a: Value, theta: f32) -> Result<Value> {
        let s = self.shape(a);
        if s.len() != 3 || s[2] % 2 != 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "rope",
                detail: format!("need [t, heads, even d], got {s:?}"),
            });
        }
        Ok(self.record(Op::Rope { theta }, vec![a]))
    }

    /// Causal scaled-dot-product attention with grouped KV heads.
    pub fn attention(
        &mut self,
        q: Value,
        k: Value,
        v: Value,
        n_heads: usize,
        n_kv_heads: usize,
    ) -> Result<Value> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        let ok = sq.len() == 3
            && sk.len() == 3
            && sv.len() == 3
            && sq[1] == n_heads
            && sk[1] == n_kv_heads
            && sk == sv
            && sq[0] == sk[0]
            && sq[2] == sk[2]
            && n_kv_heads > 0
            && n_heads % n_kv_heads == 0;
        if !ok {
            return Err(AutodiffError::ShapeMismatch {
                op: "attention",
                detail: format!("q {sq:?}, k {sk:?}, v {sv:?}, heads {n_heads}/{n_kv_heads}"),
            });
        }
        Ok(self.record(Op::Attention { n_heads, n_kv_heads }, vec![q, k, v]))
    }

    /// Identity forward; contributes exactly zero gradient to its producers.
    pub fn stop_gradient(&mut self, a: Value) -> Value {
        self.record(Op::StopGradient, vec![a])
    }

    // -- backward ----------------------------------------------------------

    /// Populate gradients of every reachable trainable value from a scalar
    /// loss. Accumulation follows reverse construction order.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.backward_run {
            return Err(AutodiffError::BackwardTwice);
        }
        let seed_shape = {
            let lt = self.value(loss);
            if lt.numel() != 1 {
                return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
            }
            lt.shape().to_vec()
        };
        self.backward_run = true;
        self.grads[loss.0 as usize] = Some(Tensor::new(seed_shape, vec![1.0]));

        for id in (0..=loss.0 as usize).rev() {
            if self.grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let node = &self.nodes[id];
            if node.inputs.is_empty() {
                continue;
            }
            let inputs: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0 as usize].value.as_ref())
                .collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0 as usize].requires_grad)
                .collect();
            let grad_out = self.grads[id].as_ref().unwrap();
            let contribs = ops::backward_op(&node.op, &inputs, &node.value, grad_out, &needs);
            let input_ids: Vec<usize> = node.inputs.iter().map(|v| v.0 as usize).collect();
            for (slot, contrib) in input_ids.into_iter().zip(contribs) {
                if let Some(c) = contrib {
                    match &mut self.grads[slot] {
                        Some(existing) => {
                            let dst = existing.data_mut();
                            for (d, s) in dst.iter_mut().zip(c.data()) {
                                *d += s;
                            }
                        }
                        empty => *empty = Some(c),
                    }
                }
            }
        }
        Ok(())
    }

    // -- f64 replay ---------------------------------------------------------

    /// Re-execute the recorded program in f64 up to `target`, optionally
    /// substituting one leaf's values. `stop_gradient` nodes replay their
    /// recorded (frozen) values so perturbations do not leak through
    /// detached edges.
    pub fn replay_f64(&self, target: Value, override_leaf: Option<(Value, &[f64])>) -> Vec<f64> {
        self.replay_values_f64(target, override_leaf).pop().unwrap()
    }

    fn replay_values_f64(
        &self,
        target: Value,
        override_leaf: Option<(Value, &[f64])>,
    ) -> Vec<Vec<f64>> {
        let upto = target.0 as usize;
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(upto + 1);
        for (id, node) in self.nodes.iter().take(upto + 1).enumerate() {
            let out = match &node.op {
                Op::Leaf => match override_leaf {
                    Some((v, data)) if v.0 as usize == id => data.to_vec(),
                    _ => node.value.data().iter().map(|x| *x as f64).collect(),
                },
                Op::StopGradient => node.value.data().iter().map(|x| *x as f64).collect(),
                op => {
                    let ins: Vec<&[f64]> = node
                        .inputs
                        .iter()
                        .map(|v| vals[v.0 as usize].as_slice())
                        .collect();
                    let shapes: Vec<&[usize]> = node
                        .inputs
                        .iter()
                        .map(|v| self.nodes[v.0 as usize].value.shape())
                        .collect();
                    ops::eval::<f64>(op, &ins, &shapes)
                }
            };
            vals.push(out);
        }
        vals
    }

    /// Analytic gradients evaluated at f64 width by running the generic
    /// backward interpreter over f64-replayed values. Same formulas as the
    /// f32 backward by construction; used by the gradient checker so that
    /// formula bugs are not masked by f32 cancellation noise.
    pub fn grads_f64(&self, loss: Value) -> Result<Vec<Option<Vec<f64>>>> {
        {
            let lt = self.value(loss);
            if lt.numel() != 1 {
                return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
            }
        }
        let vals = self.replay_values_f64(loss, None);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; vals.len()];
        grads[loss.0 as usize] = Some(vec![1.0]);
        for id in (0..=loss.0 as usize).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let node = &self.nodes[id];
            if node.inputs.is_empty() {
                continue;
            }
            let inputs: Vec<&[f64]> = node
                .inputs
                .iter()
                .map(|v| vals[v.0 as usize].as_slice())
                .collect();
            let shapes: Vec<&[usize]> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0 as usize].value.shape())
                .collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0 as usize].requires_grad)
                .collect();
            let grad_out = grads[id].as_ref().unwrap().clone();
            let contribs =
                ops::backward_generic::<f64>(&node.op, &inputs, &shapes, &vals[id], &grad_out, &needs);
            for (v, contrib) in node.inputs.iter().zip(contribs) {
                if let Some(c) = contrib {
                    let slot = &mut grads[v.0 as usize];
                    match slot {
                        Some(existing) => {
                            for (d, s) in existing.iter_mut().zip(&c) {
                                *d += s;
                            }
                        }
                        None => *slot = Some(c),
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Index of the largest element; ties break toward the lower index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    let mut bestv = row[0];
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > bestv {
            best = i;
            bestv = x;
        }
    }
    best
}
