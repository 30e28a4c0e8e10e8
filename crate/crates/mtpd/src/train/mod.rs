//! Training loop: data sampling, forward/backward per batch row (in
//! parallel, reduced in fixed row order), clipping, AdamW, schedules, and
//! checkpointing. Every logged value is fully determined by (seed, corpus,
//! config); non-finite losses abort with the last good parameters intact.

mod checkpoint;
mod corpus;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use corpus::{ingest_corpus, BatchSampler, Corpus};
pub use optim::{adamw_step, clip_grad_norm, lr_schedule, AdamW, LrScheduleKind};

use crate::autodiff::{Graph, Tensor};
use crate::losses::{breakdown, total_loss, DistillConfig, LossBreakdown, LossError};
use crate::model::{ModelError, MtpModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("cannot read corpus file {path}: {source}")]
    CorpusRead {
        path: String,
        source: std::io::Error,
    },
    #[error("corpus of {len} tokens is smaller than one row ({need})")]
    CorpusTooSmall { len: usize, need: usize },
    #[error("freeze_policy names unknown parameter group {0}")]
    UnknownFreezeGroup(String),
    #[error("non-finite loss at step {step}; aborted with last good parameters")]
    NonFiniteLoss { step: u64 },
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite gradient norm")]
    NonFiniteGradNorm,
    #[error("checkpoint {path}: {source}")]
    CheckpointIo {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error("metrics file {path}: {source}")]
    MetricsIo {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

type Result<T> = std::result::Result<T, TrainError>;

/// Optimization hyperparameters. `distill` configures the head objectives;
/// `freeze_policy` lists parameter groups excluded from updates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub decay_fraction: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub weight_decay: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub clip_norm: f32,
    pub seed: u64,
    #[serde(default)]
    pub lr_schedule: LrScheduleKind,
    #[serde(default)]
    pub freeze_policy: Vec<String>,
    pub distill: DistillConfig,
}

impl TrainConfig {
    /// Desk-scale defaults; the optimizer constants follow the usual
    /// pre-training recipe (betas 0.9/0.95, eps 1e-8, decay 0.1, clip 1.0).
    pub fn desk(total_steps: u64, batch_size: usize, seq_len: usize, seed: u64, k: usize) -> Self {
        TrainConfig {
            max_lr: 1e-3,
            min_lr: 0.0,
            warmup_steps: (total_steps / 20).min(1000),
            decay_fraction: 0.10,
            total_steps,
            batch_size,
            seq_len,
            weight_decay: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            seed,
            lr_schedule: LrScheduleKind::Wsd,
            freeze_policy: vec![],
            distill: DistillConfig::default_for(k, 256),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::InvalidConfig(m));
        if !(0.0..=self.max_lr).contains(&self.min_lr) {
            return fail(format!("need 0 <= min_lr <= max_lr, got {} / {}", self.min_lr, self.max_lr));
        }
        if !(self.decay_fraction > 0.0 && self.decay_fraction <= 1.0) {
            return fail(format!("decay_fraction {} outside (0, 1]", self.decay_fraction));
        }
        if self.warmup_steps > self.total_steps {
            return fail(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.lr_schedule == LrScheduleKind::Wsd {
            let decay_steps =
                ((self.decay_fraction * self.total_steps as f64).round() as u64).max(1);
            if self.warmup_steps > self.total_steps.saturating_sub(decay_steps) {
                return fail("warmup overlaps the decay window".into());
            }
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return fail("batch_size and seq_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if self.adam_eps <= 0.0 || self.clip_norm <= 0.0 || self.weight_decay < 0.0 {
            return fail("adam_eps/clip_norm must be positive, weight_decay nonnegative".into());
        }
        Ok(())
    }
}

/// Where a run writes its artifacts. `stop_at_step` ends the invocation
/// early (before `total_steps`) without changing the schedule, modelling an
/// interrupted run that a later resume completes.
#[derive(Debug, Clone, Default)]
pub struct TrainSink {
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub stop_at_step: Option<u64>,
}

/// Mutable training state carried across a resume.
pub struct TrainState {
    pub step: u64,
    pub opt: AdamW,
    pub sampler: BatchSampler,
}

pub struct TrainReport {
    pub final_step: u64,
    pub last: Option<LossBreakdown>,
}

fn freeze_set(model: &MtpModel, policy: &[String]) -> Result<BTreeSet<String>> {
    let mut groups: BTreeSet<String> = BTreeSet::new();
    for e in model.params.entries() {
        groups.insert(e.group.clone());
    }
    let mut freeze = BTreeSet::new();
    for name in policy {
        if !groups.contains(name) {
            return Err(TrainError::UnknownFreezeGroup(name.clone()));
        }
        freeze.insert(name.clone());
    }
    Ok(freeze)
}

fn metrics_header(k: usize) -> String {
    let mut cols = vec!["step".to_string(), "lr".into(), "main_ce".into()];
    for i in 1..=k {
        cols.push(format!("mtp_ce_{i}"));
    }
    for i in 1..=k {
        cols.push(format!("mtp_kl_{i}"));
    }
    cols.push("total".into());
    cols.push("grad_norm".into());
    cols.join(",")
}

fn metrics_row(step: u64, lr: f64, b: &LossBreakdown, grad_norm: f64) -> String {
    let mut cols = vec![step.to_string(), format!("{lr:.9e}"), format!("{:.7}", b.main_ce)];
    for x in &b.mtp_ce {
        cols.push(format!("{x:.7}"));
    }
    for x in &b.mtp_kl {
        cols.push(format!("{x:.7}"));
    }
    cols.push(format!("{:.7}", b.total));
    cols.push(format!("{grad_norm:.7}"));
    cols.join(",")
}

/// Run `cfg.total_steps` of forward → loss → backward → clip → AdamW.
/// `resume` continues a run restored from a checkpoint (same corpus and
/// config); otherwise a fresh optimizer and sampler are seeded from the
/// config. Returns after writing the final checkpoint (when a path is
/// configured). A non-finite batch loss aborts before the update, saving
/// the last good parameters.
pub fn train(
    model: &mut MtpModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    sink: &TrainSink,
) -> Result<TrainReport> {
    cfg.validate()?;
    let k = model.num_heads();
    cfg.distill.validate(k, model.config.vocab_size)?;
    let freeze = freeze_set(model, &cfg.freeze_policy)?;
    let trainable: Vec<bool> = model
        .params
        .entries()
        .iter()
        .map(|e| !freeze.contains(&e.group))
        .collect();

    let mut state = resume.unwrap_or_else(|| TrainState {
        step: 0,
        opt: AdamW::new(&model.params),
        sampler: BatchSampler::new(cfg.seq_len, k, cfg.batch_size, cfg.seed),
    });

    let mut metrics: Option<std::fs::File> = match &sink.metrics_path {
        Some(p) => {
            let mut f = std::fs::File::create(p).map_err(|e| TrainError::MetricsIo {
                path: p.display().to_string(),
                source: e,
            })?;
            writeln!(f, "{}", metrics_header(k)).map_err(|e| TrainError::MetricsIo {
                path: p.display().to_string(),
                source: e,
            })?;
            Some(f)
        }
        None => None,
    };
    let log = |f: &mut Option<std::fs::File>, line: String| -> Result<()> {
        if let Some(f) = f {
            writeln!(f, "{line}").map_err(|e| TrainError::MetricsIo {
                path: "metrics".into(),
                source: e,
            })?;
        }
        Ok(())
    };
    let save = |model: &MtpModel, state: &TrainState| -> Result<()> {
        if let Some(p) = &sink.checkpoint_path {
            save_checkpoint(
                p,
                model,
                Some(&state.opt),
                state.step,
                state.sampler.seed(),
                state.sampler.word_pos(),
                &freeze,
            )?;
        }
        Ok(())
    };

    let mut last = None;
    let until = cfg.total_steps.min(sink.stop_at_step.unwrap_or(u64::MAX));
    while state.step < until {
        // any failure mid-step aborts with the pre-step parameters saved
        match run_one_step(model, corpus, cfg, &mut state, &freeze, &trainable) {
            Ok((mean, lr, grad_norm)) => {
                log(&mut metrics, metrics_row(state.step, lr, &mean, grad_norm))?;
                last = Some(mean);
                state.step += 1;
            }
            Err(e) => {
                let _ = save(model, &state);
                return Err(e);
            }
        }
    }

    save(model, &state)?;
    Ok(TrainReport {
        final_step: state.step,
        last,
    })
}

fn run_one_step(
    model: &mut MtpModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    state: &mut TrainState,
    freeze: &BTreeSet<String>,
    trainable: &[bool],
) -> Result<(LossBreakdown, f64, f64)> {
    let step = state.step;
    let lr = lr_schedule(step, cfg);
    let rows = state.sampler.next_batch(corpus)?;

    // each row gets its own graph; results reduce in row order so the step
    // is bitwise reproducible at any thread count
    let per_row: Vec<std::result::Result<(Vec<Option<Tensor>>, LossBreakdown), TrainError>> = rows
        .par_iter()
        .map(|row| {
            let mut g = Graph::new();
            let bind = model.bind(&mut g, freeze);
            let out = model.forward_train(&mut g, &bind, row)?;
            let lg = total_loss(&mut g, &out, row, &cfg.distill, step)?;
            g.backward(lg.total).map_err(LossError::from)?;
            let grads: Vec<Option<Tensor>> =
                bind.leaves.iter().map(|v| g.take_grad(*v)).collect();
            Ok((grads, breakdown(&g, &lg)))
        })
        .collect();

    let mut grads: Vec<Option<Tensor>> = vec![None; model.params.len()];
    let mut sums: Option<LossBreakdown> = None;
    for item in per_row {
        let (row_grads, b) = item?;
        for (slot, contrib) in grads.iter_mut().zip(row_grads) {
            if let Some(c) = contrib {
                match slot {
                    Some(acc) => {
                        for (d, s) in acc.data_mut().iter_mut().zip(c.data()) {
                            *d += s;
                        }
                    }
                    None => *slot = Some(c),
                }
            }
        }
        sums = Some(match sums {
            None => b,
            Some(mut acc) => {
                acc.main_ce += b.main_ce;
                acc.total += b.total;
                for (a, x) in acc.mtp_ce.iter_mut().zip(&b.mtp_ce) {
                    *a += x;
                }
                for (a, x) in acc.mtp_kl.iter_mut().zip(&b.mtp_kl) {
                    *a += x;
                }
                acc
            }
        });
    }
    let inv_b = 1.0 / cfg.batch_size as f32;
    let mut mean = sums.expect("batch_size >= 1");
    mean.main_ce *= inv_b;
    mean.total *= inv_b;
    for x in mean.mtp_ce.iter_mut().chain(mean.mtp_kl.iter_mut()) {
        *x *= inv_b;
    }
    for g in grads.iter_mut().flatten() {
        for x in g.data_mut() {
            *x *= inv_b;
        }
    }

    if !mean.total.is_finite() {
        return Err(TrainError::NonFiniteLoss { step });
    }

    let grad_norm = clip_grad_norm(&mut grads, trainable, cfg.clip_norm)?;
    adamw_step(&mut model.params, &grads, &mut state.opt, lr, cfg, trainable)?;
    Ok((mean, lr, grad_norm))
}

/// Restore a [`TrainState`] (and model) from a checkpoint for resuming.
pub fn resume_state(ckpt: Checkpoint, cfg: &TrainConfig) -> (MtpModel, TrainState) {
    let mut sampler = BatchSampler::new(
        cfg.seq_len,
        ckpt.model.num_heads(),
        cfg.batch_size,
        ckpt.rng_seed,
    );
    sampler.set_word_pos(ckpt.rng_word_pos);
    let opt = ckpt.opt.unwrap_or_else(|| AdamW::new(&ckpt.model.params));
    (
        ckpt.model,
        TrainState {
            step: ckpt.step,
            opt,
            sampler,
        },
    )
}

#[cfg(test)]
mod tests;
