//! Decoder-only transformer trunk with cascaded multi-token prediction heads.
//!
//! The trunk is a standard pre-norm block stack (RMSNorm, rotary attention
//! with grouped KV heads, SwiGLU MLP). Each prediction head k consumes the
//! hidden states emitted by head k-1 (head 0 being the trunk), fuses them
//! with the embeddings of tokens shifted k positions ahead, runs one decoder
//! block, and projects through the shared output head. Embedding matrix and
//! output projection are single shared parameter instances; head k at
//! position p predicts the token at position p + k + 1.

use crate::autodiff::{AutodiffError, Graph, Tensor, Value};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u16, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("row of {len} tokens is too short: need seq_len + num_heads + 1 = {need}")]
    RowTooShort { len: usize, need: usize },
    #[error("head index {k} out of range: model has {heads} heads")]
    HeadOutOfRange { k: usize, heads: usize },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("parameter {name} expects {expect} elements, got {got}")]
    ParamSize {
        name: String,
        expect: usize,
        got: usize,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, ModelError>;

fn default_qk_norm() -> bool {
    true
}

fn default_initializer_range() -> f32 {
    0.02
}

fn default_mtp_head_layers() -> usize {
    1
}

/// Architecture hyperparameters. `qk_norm` and `initializer_range` carry
/// defaults (true, 0.02); everything else must be spelled out.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub ffn_hidden_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_theta: f32,
    pub norm_eps: f32,
    pub num_mtp_heads: usize,
    #[serde(default = "default_mtp_head_layers")]
    pub mtp_head_layers: usize,
    pub seed: u64,
    #[serde(default = "default_qk_norm")]
    pub qk_norm: bool,
    #[serde(default = "default_initializer_range")]
    pub initializer_range: f32,
}

impl ModelConfig {
    /// Desk-scale default: trains in minutes on a CPU while exercising
    /// every code path.
    pub fn desk(num_mtp_heads: usize, seed: u64) -> Self {
        ModelConfig {
            dim: 64,
            n_layers: 4,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            ffn_hidden_dim: 256,
            vocab_size: 256,
            max_seq_len: 128,
            rope_theta: 10000.0,
            norm_eps: 1e-5,
            num_mtp_heads,
            mtp_head_layers: 1,
            seed,
            qk_norm: true,
            initializer_range: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.dim == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.n_kv_heads == 0
            || self.head_dim == 0
            || self.ffn_hidden_dim == 0
            || self.max_seq_len == 0
        {
            return fail("dimensions must be positive".into());
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.head_dim % 2 != 0 {
            return fail(format!("head_dim {} must be even for rotary", self.head_dim));
        }
        if self.vocab_size == 0 || self.vocab_size > u16::MAX as usize + 1 {
            return fail(format!("vocab_size {} out of range", self.vocab_size));
        }
        if self.mtp_head_layers != 1 {
            return fail(format!(
                "mtp_head_layers is fixed at 1, got {}",
                self.mtp_head_layers
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// parameter store
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: String,
    pub value: Arc<Tensor>,
}

/// Flat named parameter set. Construction order is fixed, which fixes both
/// the seeded init stream and optimizer iteration order.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.entries[idx].value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    fn push(&mut self, name: String, group: String, value: Tensor) -> usize {
        self.entries.push(ParamEntry {
            name,
            group,
            value: Arc::new(value),
        });
        self.entries.len() - 1
    }

    /// Replace a parameter's data in place (same shape).
    pub fn set(&mut self, idx: usize, data: Vec<f32>) {
        let entry = &mut self.entries[idx];
        let shape = entry.value.shape().to_vec();
        entry.value = Arc::new(Tensor::new(shape, data));
    }

    /// Mutable access for the optimizer; clones only if a forward graph
    /// still holds the tensor.
    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[idx].value)
    }
}

/// Parameter indices for one decoder block.
#[derive(Debug, Clone)]
pub struct BlockIdx {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub q_norm: Option<usize>,
    pub k_norm: Option<usize>,
    pub mlp_norm: usize,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

/// Parameter indices for one MTP head: dual input norms, fusion projection,
/// one decoder block.
#[derive(Debug, Clone)]
pub struct HeadIdx {
    pub norm_hidden: usize,
    pub norm_embed: usize,
    pub fusion: usize,
    pub block: BlockIdx,
}

pub struct MtpModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embedding: usize,
    pub output_projection: usize,
    pub final_norm: usize,
    pub trunk_blocks: Vec<BlockIdx>,
    pub heads: Vec<HeadIdx>,
}

/// Group name for parameters updated together ("trunk" or "head{k}").
pub const TRUNK_GROUP: &str = "trunk";

pub fn head_group(k: usize) -> String {
    format!("head{k}")
}

struct Init {
    rng: ChaCha8Rng,
    std: f32,
}

impl Init {
    fn normal(&mut self, shape: Vec<usize>) -> Tensor {
        use rand_distr_normal::draw;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| draw(&mut self.rng) * self.std).collect();
        Tensor::new(shape, data)
    }

    fn ones(&self, len: usize) -> Tensor {
        Tensor::new(vec![len], vec![1.0; len])
    }
}

/// Box-Muller standard normal. Hand-rolled so the draw sequence is pinned by
/// this crate rather than a distribution crate's internals.
mod rand_distr_normal {
    use rand::Rng;

    pub fn draw<R: Rng>(rng: &mut R) -> f32 {
        loop {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            if z.is_finite() {
                return z as f32;
            }
        }
    }
}

fn init_block(params: &mut ParamStore, init: &mut Init, cfg: &ModelConfig, prefix: &str, group: &str) -> BlockIdx {
    let d = cfg.dim;
    let hd = cfg.n_heads * cfg.head_dim;
    let kd = cfg.n_kv_heads * cfg.head_dim;
    let f = cfg.ffn_hidden_dim;
    let g = group.to_string();
    let attn_norm = params.push(format!("{prefix}.attn_norm.gain"), g.clone(), init.ones(d));
    let wq = params.push(format!("{prefix}.wq"), g.clone(), init.normal(vec![d, hd]));
    let wk = params.push(format!("{prefix}.wk"), g.clone(), init.normal(vec![d, kd]));
    let wv = params.push(format!("{prefix}.wv"), g.clone(), init.normal(vec![d, kd]));
    let wo = params.push(format!("{prefix}.wo"), g.clone(), init.normal(vec![hd, d]));
    let (q_norm, k_norm) = if cfg.qk_norm {
        (
            Some(params.push(
                format!("{prefix}.q_norm.gain"),
                g.clone(),
                init.ones(cfg.head_dim),
            )),
            Some(params.push(
                format!("{prefix}.k_norm.gain"),
                g.clone(),
                init.ones(cfg.head_dim),
            )),
        )
    } else {
        (None, None)
    };
    let mlp_norm = params.push(format!("{prefix}.mlp_norm.gain"), g.clone(), init.ones(d));
    let w_gate = params.push(format!("{prefix}.w_gate"), g.clone(), init.normal(vec![d, f]));
    let w_up = params.push(format!("{prefix}.w_up"), g.clone(), init.normal(vec![d, f]));
    let w_down = params.push(format!("{prefix}.w_down"), g, init.normal(vec![f, d]));
    BlockIdx {
        attn_norm,
        wq,
        wk,
        wv,
        wo,
        q_norm,
        k_norm,
        mlp_norm,
        w_gate,
        w_up,
        w_down,
    }
}

fn init_head(params: &mut ParamStore, init: &mut Init, cfg: &ModelConfig, k: usize) -> HeadIdx {
    let d = cfg.dim;
    let group = head_group(k);
    let norm_hidden = params.push(
        format!("head.{k}.norm_hidden.gain"),
        group.clone(),
        init.ones(d),
    );
    let norm_embed = params.push(
        format!("head.{k}.norm_embed.gain"),
        group.clone(),
        init.ones(d),
    );
    let fusion = params.push(
        format!("head.{k}.fusion"),
        group.clone(),
        init.normal(vec![2 * d, d]),
    );
    let block = init_block(params, init, cfg, &format!("head.{k}.block"), &group);
    HeadIdx {
        norm_hidden,
        norm_embed,
        fusion,
        block,
    }
}

/// Build a model with parameters drawn from a seeded normal
/// (`initializer_range` standard deviation); gains start at one.
/// The same seed always yields bitwise-identical parameters.
pub fn init_model(config: ModelConfig) -> Result<MtpModel> {
    config.validate()?;
    let mut params = ParamStore::default();
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        std: config.initializer_range,
    };
    let d = config.dim;
    let v = config.vocab_size;
    let embedding = params.push("embedding".into(), TRUNK_GROUP.into(), init.normal(vec![v, d]));
    let output_projection = params.push(
        "output_projection".into(),
        TRUNK_GROUP.into(),
        init.normal(vec![d, v]),
    );
    let final_norm = params.push("final_norm.gain".into(), TRUNK_GROUP.into(), init.ones(d));
    let trunk_blocks = (0..config.n_layers)
        .map(|i| init_block(&mut params, &mut init, &config, &format!("trunk.{i}"), TRUNK_GROUP))
        .collect();
    let heads = (1..=config.num_mtp_heads)
        .map(|k| init_head(&mut params, &mut init, &config, k))
        .collect();
    Ok(MtpModel {
        config,
        params,
        embedding,
        output_projection,
        final_norm,
        trunk_blocks,
        heads,
    })
}

impl MtpModel {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.entries().iter().map(|e| e.value.numel()).sum()
    }

    /// Append a new head whose parameters are bitwise copies of head
    /// `src_k` (1-based). Returns the new head's index. Shared embedding
    /// and output projection remain single instances.
    pub fn add_head_copied_from(&mut self, src_k: usize) -> Result<usize> {
        if src_k == 0 || src_k > self.heads.len() {
            return Err(ModelError::HeadOutOfRange {
                k: src_k,
                heads: self.heads.len(),
            });
        }
        let new_k = self.heads.len() + 1;
        let src = self.heads[src_k - 1].clone();
        let group = head_group(new_k);
        let src_prefix = format!("head.{src_k}.");
        let dst_prefix = format!("head.{new_k}.");
        let mut copy = |params: &mut ParamStore, idx: usize| -> usize {
            let e = &params.entries()[idx];
            let name = e.name.replacen(&src_prefix, &dst_prefix, 1);
            let value = e.value.as_ref().clone();
            params.push(name, group.clone(), value)
        };
        let head = HeadIdx {
            norm_hidden: copy(&mut self.params, src.norm_hidden),
            norm_embed: copy(&mut self.params, src.norm_embed),
            fusion: copy(&mut self.params, src.fusion),
            block: BlockIdx {
                attn_norm: copy(&mut self.params, src.block.attn_norm),
                wq: copy(&mut self.params, src.block.wq),
                wk: copy(&mut self.params, src.block.wk),
                wv: copy(&mut self.params, src.block.wv),
                wo: copy(&mut self.params, src.block.wo),
                q_norm: src.block.q_norm.map(|i| copy(&mut self.params, i)),
                k_norm: src.block.k_norm.map(|i| copy(&mut self.params, i)),
                mlp_norm: copy(&mut self.params, src.block.mlp_norm),
                w_gate: copy(&mut self.params, src.block.w_gate),
                w_up: copy(&mut self.params, src.block.w_up),
                w_down: copy(&mut self.params, src.block.w_down),
            },
        };
        self.heads.push(head);
        self.config.num_mtp_heads = self.heads.len();
        Ok(new_k)
    }

    pub fn set_param(&mut self, name: &str, data: Vec<f32>) -> Result<()> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| ModelError::UnknownParam(name.into()))?;
        let expect = self.params.tensor(idx).numel();
        if data.len() != expect {
            return Err(ModelError::ParamSize {
                name: name.into(),
                expect,
                got: data.len(),
            });
        }
        self.params.set(idx, data);
        Ok(())
    }

    /// Bind parameters into a graph. Groups named in `freeze` become
    /// detached constants: they contribute to the forward values but are
    /// excluded from the backward pass entirely.
    pub fn bind(&self, g: &mut Graph, freeze: &BTreeSet<String>) -> Binding {
        let leaves = self
            .params
            .entries()
            .iter()
            .map(|e| {
                if freeze.contains(&e.group) {
                    g.constant_shared(Arc::clone(&e.value))
                } else {
                    g.leaf_shared(Arc::clone(&e.value))
                }
            })
            .collect();
        Binding { leaves }
    }

    pub fn bind_all_frozen(&self, g: &mut Graph) -> Binding {
        let leaves = self
            .params
            .entries()
            .iter()
            .map(|e| g.constant_shared(Arc::clone(&e.value)))
            .collect();
        Binding { leaves }
    }

    fn check_tokens(&self, tokens: &[u16]) -> Result<()> {
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id: t,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn block_forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        idx: &BlockIdx,
        x: Value,
    ) -> Result<Value> {
        let cfg = &self.config;
        let t = g.shape(x)[0];
        let (h, hkv, hd) = (cfg.n_heads, cfg.n_kv_heads, cfg.head_dim);
        let eps = cfg.norm_eps;
        let p = |i: usize| bind.leaves[i];

        let a = g.rms_norm(x, p(idx.attn_norm), eps)?;
        let q = g.matmul(a, p(idx.wq))?;
        let k = g.matmul(a, p(idx.wk))?;
        let v = g.matmul(a, p(idx.wv))?;
        let mut q = g.reshape(q, vec![t, h, hd])?;
        let mut k = g.reshape(k, vec![t, hkv, hd])?;
        let v = g.reshape(v, vec![t, hkv, hd])?;
        if let (Some(qn), Some(kn)) = (idx.q_norm, idx.k_norm) {
            q = g.rms_norm(q, p(qn), eps)?;
            k = g.rms_norm(k, p(kn), eps)?;
        }
        q = g.rope(q, cfg.rope_theta)?;
        k = g.rope(k, cfg.rope_theta)?;
        let attn = g.attention(q, k, v, h, hkv)?;
        let attn = g.reshape(attn, vec![t, h * hd])?;
        let attn = g.matmul(attn, p(idx.wo))?;
        let x = g.add(x, attn)?;

        let m = g.rms_norm(x, p(idx.mlp_norm), eps)?;
        let gate = g.matmul(m, p(idx.w_gate))?;
        let gate = g.silu(gate);
        let up = g.matmul(m, p(idx.w_up))?;
        let act = g.mul(gate, up)?;
        let down = g.matmul(act, p(idx.w_down))?;
        g.add(x, down).map_err(Into::into)
    }

    fn project_out(&self, g: &mut Graph, bind: &Binding, hidden: Value) -> Result<Value> {
        let n = g.rms_norm(hidden, bind.leaves[self.final_norm], self.config.norm_eps)?;
        g.matmul(n, bind.leaves[self.output_projection])
            .map_err(Into::into)
    }

    /// Causal trunk pass over `tokens`: returns the pre-norm hidden chain
    /// and the main-head logits.
    pub fn trunk_forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        tokens: &[u16],
    ) -> Result<(Value, Value)> {
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        self.check_tokens(tokens)?;
        let mut x = g.embedding(bind.leaves[self.embedding], tokens)?;
        for blk in &self.trunk_blocks {
            x = self.block_forward(g, bind, blk, x)?;
        }
        let logits = self.project_out(g, bind, x)?;
        Ok((x, logits))
    }

    /// One cascade step. `physical_k` selects the head weights (1-based);
    /// `shift` is the token offset of this cascade position, which equals
    /// `physical_k` during training and the draft ordinal during looped
    /// decoding. Consumes `prev_hidden` of length L and embeddings of
    /// `tokens[shift .. shift + L]`; row p of the logits predicts
    /// `tokens[p + shift + 1]`.
    pub fn mtp_head_forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        physical_k: usize,
        shift: usize,
        prev_hidden: Value,
        tokens: &[u16],
    ) -> Result<(Value, Value)> {
        if physical_k == 0 || physical_k > self.heads.len() {
            return Err(ModelError::HeadOutOfRange {
                k: physical_k,
                heads: self.heads.len(),
            });
        }
        let l = g.shape(prev_hidden)[0];
        if tokens.len() < shift + l {
            return Err(ModelError::RowTooShort {
                len: tokens.len(),
                need: shift + l,
            });
        }
        let window = &tokens[shift..shift + l];
        self.check_tokens(window)?;
        let head = &self.heads[physical_k - 1];
        let eps = self.config.norm_eps;
        let e = g.embedding(bind.leaves[self.embedding], window)?;
        let hn = g.rms_norm(prev_hidden, bind.leaves[head.norm_hidden], eps)?;
        let en = g.rms_norm(e, bind.leaves[head.norm_embed], eps)?;
        let fused = g.concat_last(hn, en)?;
        let fused = g.matmul(fused, bind.leaves[head.fusion])?;
        let hidden = self.block_forward(g, bind, &head.block, fused)?;
        let logits = self.project_out(g, bind, hidden)?;
        Ok((hidden, logits))
    }

    /// Training pass over one row of `seq_len + K + 1` tokens. The trunk
    /// consumes the first `seq_len` tokens; every head covers all `seq_len`
    /// positions thanks to the extra targets at the end of the row.
    pub fn forward_train(&self, g: &mut Graph, bind: &Binding, row: &[u16]) -> Result<ForwardOutputs> {
        let k = self.num_heads();
        if row.len() < k + 2 {
            return Err(ModelError::RowTooShort {
                len: row.len(),
                need: k + 2,
            });
        }
        let t = row.len() - k - 1;
        self.check_tokens(row)?;
        let (trunk_hidden, main_logits) = self.trunk_forward(g, bind, &row[..t])?;
        let mut hidden = vec![trunk_hidden];
        let mut head_logits = Vec::with_capacity(k);
        let mut prev = trunk_hidden;
        for kk in 1..=k {
            let (h, logits) = self.mtp_head_forward(g, bind, kk, kk, prev, row)?;
            head_logits.push(logits);
            hidden.push(h);
            prev = h;
        }
        Ok(ForwardOutputs {
            seq_len: t,
            main_logits,
            head_logits,
            hidden,
        })
    }

    /// Inference-only trunk pass returning plain tensors.
    pub fn main_pass(&self, tokens: &[u16]) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::inference();
        let bind = self.bind_all_frozen(&mut g);
        let (h, logits) = self.trunk_forward(&mut g, &bind, tokens)?;
        Ok((g.value(h).clone(), g.value(logits).clone()))
    }

    /// Inference-only head pass returning plain tensors.
    pub fn head_pass(
        &self,
        physical_k: usize,
        shift: usize,
        prev_hidden: &Tensor,
        tokens: &[u16],
    ) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::inference();
        let bind = self.bind_all_frozen(&mut g);
        let ph = g.constant(prev_hidden.clone());
        let (h, logits) = self.mtp_head_forward(&mut g, &bind, physical_k, shift, ph, tokens)?;
        Ok((g.value(h).clone(), g.value(logits).clone()))
    }
}

/// Parameter leaves of one graph, aligned with `ParamStore` order.
pub struct Binding {
    pub leaves: Vec<Value>,
}

/// Logits and hidden chains from a training pass.
///
/// `hidden[0]` is the trunk chain; `hidden[k]` the chain after head k.
/// `main_logits` row p predicts row token p+1; `head_logits[k-1]` row p
/// predicts row token p+k+1. All logit tensors are `[seq_len, vocab]`.
pub struct ForwardOutputs {
    pub seq_len: usize,
    pub main_logits: Value,
    pub head_logits: Vec<Value>,
    pub hidden: Vec<Value>,
}

#[cfg(test)]
mod tests;
