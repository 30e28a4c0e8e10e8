//! Training objectives for the cascaded heads.
//!
//! The total objective is `main_ce + Σ_k α_k·ce_k + Σ_k β_k·kl_k`. The KL
//! term distills each head toward the main head's output distribution,
//! restricted to the TopN logits of the teacher row and renormalized over
//! that slice; the teacher side is wrapped in stop-gradient by default so
//! distillation cannot push back on the main path. Forward, reverse, and
//! hybrid KL directions are supported, as are ensemble teachers built from
//! the main head plus earlier heads.
//!
//! Alignment: head k's logits at row p predict token p+k+1, the main head's
//! row p predicts token p+1, so the distillation pair for head k is head
//! rows `0..T-k` against main rows `k..T` — the positions where both
//! predict the same token. Cross-entropy covers all T positions of every
//! head (the training rows carry K extra target tokens).

use crate::autodiff::{AutodiffError, Graph, Value};
use crate::model::ForwardOutputs;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid distillation config: {0}")]
    InvalidConfig(String),
    #[error("top_n {n} out of range 1..={v}")]
    BadTopN { n: usize, v: usize },
    #[error("row of {len} tokens misaligned with seq_len {t} and {k} heads")]
    Misaligned { len: usize, t: usize, k: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, LossError>;

/// Teacher prob floor before it multiplies a log-ratio; keeps extreme
/// truncation from producing 0 * inf. Shifts the loss by < 1e-10.
const TEACHER_PROB_FLOOR: f32 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlVariant {
    Forward,
    Reverse,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopnSource {
    /// TopN of the teacher row (the paper's default).
    Main,
    /// Union of the teacher row's and student row's TopN sets.
    UnionMainHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherStrategy {
    /// Main head only.
    Main,
    /// Weighted average of main + earlier head logits, then TopN/softmax.
    EnsembleMean,
    /// Separate KL against each teacher, losses weighted.
    EnsembleSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Constant,
    /// Linear interpolation of uniform α/β until `end_step`, then held.
    LinearStep,
}

/// Loss strategy record. `alpha`/`beta` hold one weight per head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    pub alpha: Vec<f32>,
    pub beta: Vec<f32>,
    pub top_n: usize,
    pub kl_variant: KlVariant,
    pub hybrid_lambda: f32,
    pub topn_source: TopnSource,
    pub teacher: TeacherStrategy,
    /// Weights over [main, head1, head2, ...]; head k uses the first k
    /// entries renormalized. Uniform when absent.
    pub teacher_weights: Option<Vec<f32>>,
    pub schedule: ScheduleMode,
    pub schedule_from_alpha: f32,
    pub schedule_to_alpha: f32,
    pub schedule_from_beta: f32,
    pub schedule_to_beta: f32,
    pub schedule_end_step: u64,
    /// Stop-gradient on the teacher logits. Turning this off is the
    /// no-detach ablation and lets the KL term push on the main path.
    pub detach: bool,
}

impl DistillConfig {
    /// Defaults for K heads at byte-scale vocab: α_k = 0.3, β_k = 1.0 for a
    /// single head and 0.5 for more, forward KL, teacher TopN, detach on.
    pub fn default_for(k: usize, vocab: usize) -> Self {
        let beta = if k == 1 { 1.0 } else { 0.5 };
        DistillConfig {
            alpha: vec![0.3; k],
            beta: vec![beta; k],
            top_n: 32.min(vocab),
            kl_variant: KlVariant::Forward,
            hybrid_lambda: 0.5,
            topn_source: TopnSource::Main,
            teacher: TeacherStrategy::Main,
            teacher_weights: None,
            schedule: ScheduleMode::Constant,
            schedule_from_alpha: 0.7,
            schedule_to_alpha: 0.3,
            schedule_from_beta: 0.1,
            schedule_to_beta: 0.5,
            schedule_end_step: 2000,
            detach: true,
        }
    }

    pub fn validate(&self, k: usize, vocab: usize) -> Result<()> {
        if self.alpha.len() != k || self.beta.len() != k {
            return Err(LossError::InvalidConfig(format!(
                "alpha/beta need {k} entries, got {}/{}",
                self.alpha.len(),
                self.beta.len()
            )));
        }
        if self.alpha.iter().chain(&self.beta).any(|w| *w < 0.0) {
            return Err(LossError::InvalidConfig("alpha/beta must be >= 0".into()));
        }
        if self.top_n < 1 || self.top_n > vocab {
            return Err(LossError::BadTopN {
                n: self.top_n,
                v: vocab,
            });
        }
        if !(0.0..=1.0).contains(&self.hybrid_lambda) {
            return Err(LossError::InvalidConfig(format!(
                "hybrid_lambda {} outside [0,1]",
                self.hybrid_lambda
            )));
        }
        if let Some(w) = &self.teacher_weights {
            if w.is_empty() || w.iter().any(|x| *x < 0.0) || w.iter().sum::<f32>() <= 0.0 {
                return Err(LossError::InvalidConfig(
                    "teacher_weights must be nonnegative with positive sum".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Per-step α/β. Constant mode returns the configured vectors; linear mode
/// interpolates uniform values until `end_step` and holds them after.
pub fn weight_schedule(cfg: &DistillConfig, k: usize, step: u64) -> (Vec<f32>, Vec<f32>) {
    match cfg.schedule {
        ScheduleMode::Constant => (cfg.alpha.clone(), cfg.beta.clone()),
        ScheduleMode::LinearStep => {
            let t = if cfg.schedule_end_step == 0 {
                1.0
            } else {
                (step as f32 / cfg.schedule_end_step as f32).min(1.0)
            };
            let a = cfg.schedule_from_alpha + (cfg.schedule_to_alpha - cfg.schedule_from_alpha) * t;
            let b = cfg.schedule_from_beta + (cfg.schedule_to_beta - cfg.schedule_from_beta) * t;
            (vec![a; k], vec![b; k])
        }
    }
}

/// Indices of the `n` largest entries, ordered by rank; ties break toward
/// the lower index. Deterministic for any finite input.
pub fn topn_indices(row: &[f32], n: usize) -> Vec<u32> {
    debug_assert!(n >= 1 && n <= row.len());
    let mut idx: Vec<u32> = (0..row.len() as u32).collect();
    idx.sort_unstable_by(|&a, &b| {
        row[b as usize]
            .total_cmp(&row[a as usize])
            .then(a.cmp(&b))
    });
    idx.truncate(n);
    idx
}

/// Mean over positions of `-log_softmax(logits)[target]`.
pub fn ce_loss(g: &mut Graph, logits: Value, targets: &[u16]) -> Result<Value> {
    let rows = g.shape(logits)[0];
    if targets.len() != rows {
        return Err(LossError::Misaligned {
            len: targets.len(),
            t: rows,
            k: 0,
        });
    }
    let lsm = g.log_softmax(logits, g.shape(logits).len() - 1)?;
    let ids: Vec<u32> = targets.iter().map(|&x| x as u32).collect();
    let picked = g.gather_last(lsm, ids, 1)?;
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

/// Per-head cross-entropy over all T positions plus the α-weighted sum.
/// Head k's targets are row tokens `k+1 ..= T+k`.
pub fn mtp_ce_losses(
    g: &mut Graph,
    outputs: &ForwardOutputs,
    row: &[u16],
    alpha: &[f32],
) -> Result<(Vec<Value>, Value)> {
    let t = outputs.seq_len;
    let k = outputs.head_logits.len();
    if row.len() != t + k + 1 || alpha.len() != k {
        return Err(LossError::Misaligned {
            len: row.len(),
            t,
            k,
        });
    }
    let mut per_head = Vec::with_capacity(k);
    let mut weighted = g.constant(crate::Tensor::scalar(0.0));
    for (i, &logits) in outputs.head_logits.iter().enumerate() {
        let kk = i + 1;
        let ce = ce_loss(g, logits, &row[kk + 1..kk + 1 + t])?;
        per_head.push(ce);
        let scaled = g.scale(ce, alpha[i]);
        weighted = g.add(weighted, scaled)?;
    }
    Ok((per_head, weighted))
}

/// One aligned student/teacher KL at the configured direction and
/// truncation. `student_rows` and `teacher_rows` are same-shape `[R, V]`
/// logits whose rows predict the same tokens.
pub fn kl_loss_rows(
    g: &mut Graph,
    student_rows: Value,
    teacher_rows: Value,
    n: usize,
    source: TopnSource,
    variant: KlVariant,
    hybrid_lambda: f32,
    detach: bool,
) -> Result<Value> {
    let shape = g.shape(student_rows).to_vec();
    if shape != g.shape(teacher_rows) || shape.len() != 2 {
        return Err(LossError::Misaligned {
            len: g.shape(teacher_rows).first().copied().unwrap_or(0),
            t: shape.first().copied().unwrap_or(0),
            k: 0,
        });
    }
    let (rows, v) = (shape[0], shape[1]);
    if n < 1 || n > v {
        return Err(LossError::BadTopN { n, v });
    }
    let teacher = if detach {
        g.stop_gradient(teacher_rows)
    } else {
        teacher_rows
    };
    let inv_rows = 1.0 / rows as f32;

    match source {
        TopnSource::Main => {
            let mut indices = Vec::with_capacity(rows * n);
            for r in 0..rows {
                let trow = &g.value(teacher).data()[r * v..(r + 1) * v];
                indices.extend(topn_indices(trow, n));
            }
            let tg = g.gather_last(teacher, indices.clone(), n)?;
            let sg = g.gather_last(student_rows, indices, n)?;
            let kl = kl_of_slices(g, sg, tg, variant, hybrid_lambda)?;
            Ok(g.scale(kl, inv_rows))
        }
        TopnSource::UnionMainHead => {
            // union sizes vary per row, so rows are reduced one at a time
            let mut acc = g.constant(crate::Tensor::scalar(0.0));
            for r in 0..rows {
                let trow = &g.value(teacher).data()[r * v..(r + 1) * v];
                let srow = &g.value(student_rows).data()[r * v..(r + 1) * v];
                let mut union = topn_indices(trow, n);
                for ix in topn_indices(srow, n) {
                    if !union.contains(&ix) {
                        union.push(ix);
                    }
                }
                let u = union.len();
                let tr = g.slice_rows(teacher, r, 1)?;
                let sr = g.slice_rows(student_rows, r, 1)?;
                let tg = g.gather_last(tr, union.clone(), u)?;
                let sg = g.gather_last(sr, union, u)?;
                let kl = kl_of_slices(g, sg, tg, variant, hybrid_lambda)?;
                acc = g.add(acc, kl)?;
            }
            Ok(g.scale(acc, inv_rows))
        }
    }
}

/// Sum over all rows of the chosen KL direction between gathered slices.
/// Teacher and student are renormalized over the slice by (log-)softmax.
fn kl_of_slices(
    g: &mut Graph,
    student: Value,
    teacher: Value,
    variant: KlVariant,
    lambda: f32,
) -> Result<Value> {
    let last = g.shape(student).len() - 1;
    let fwd = |g: &mut Graph| -> Result<Value> {
        let q = g.softmax(teacher, last)?;
        let lq = g.log_softmax(teacher, last)?;
        let lp = g.log_softmax(student, last)?;
        let qf = g.clamp_min(q, TEACHER_PROB_FLOOR);
        let diff = g.sub(lq, lp)?;
        let term = g.mul(qf, diff)?;
        Ok(g.sum(term))
    };
    let rev = |g: &mut Graph| -> Result<Value> {
        let p = g.softmax(student, last)?;
        let lp = g.log_softmax(student, last)?;
        let lq = g.log_softmax(teacher, last)?;
        let diff = g.sub(lp, lq)?;
        let term = g.mul(p, diff)?;
        Ok(g.sum(term))
    };
    match variant {
        KlVariant::Forward => fwd(g),
        KlVariant::Reverse => rev(g),
        KlVariant::Hybrid => {
            let f = fwd(g)?;
            let r = rev(g)?;
            let sf = g.scale(f, lambda);
            let sr = g.scale(r, 1.0 - lambda);
            g.add(sf, sr).map_err(Into::into)
        }
    }
}

/// Forward TopN-selected KL between one head's logits and teacher logits
/// (rows already aligned), mean over positions.
pub fn topn_kl_loss(
    g: &mut Graph,
    head_rows: Value,
    main_rows: Value,
    n: usize,
    source: TopnSource,
    detach: bool,
) -> Result<Value> {
    kl_loss_rows(g, head_rows, main_rows, n, source, KlVariant::Forward, 0.5, detach)
}

/// Reverse-direction KL: expectation over the student distribution.
pub fn reverse_kl_loss(
    g: &mut Graph,
    head_rows: Value,
    main_rows: Value,
    n: usize,
    source: TopnSource,
    detach: bool,
) -> Result<Value> {
    kl_loss_rows(g, head_rows, main_rows, n, source, KlVariant::Reverse, 0.5, detach)
}

/// `λ·forward + (1−λ)·reverse`.
pub fn hybrid_kl_loss(
    g: &mut Graph,
    head_rows: Value,
    main_rows: Value,
    n: usize,
    source: TopnSource,
    lambda: f32,
    detach: bool,
) -> Result<Value> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LossError::InvalidConfig(format!(
            "hybrid_lambda {lambda} outside [0,1]"
        )));
    }
    kl_loss_rows(g, head_rows, main_rows, n, source, KlVariant::Hybrid, lambda, detach)
}

/// Teacher list for head k under a strategy: the main head plus heads
/// `1..k`, each sliced to the rows predicting head k's tokens.
fn teacher_slices(
    g: &mut Graph,
    outputs: &ForwardOutputs,
    k: usize,
    count: usize,
) -> Result<Vec<Value>> {
    let mut teachers = Vec::with_capacity(k);
    teachers.push(g.slice_rows(outputs.main_logits, k, count)?);
    for j in 1..k {
        teachers.push(g.slice_rows(outputs.head_logits[j - 1], k - j, count)?);
    }
    Ok(teachers)
}

fn teacher_weights_for(cfg: &DistillConfig, k: usize) -> Vec<f32> {
    let raw: Vec<f32> = match &cfg.teacher_weights {
        Some(w) => (0..k).map(|i| w.get(i).copied().unwrap_or(0.0)).collect(),
        None => vec![1.0; k],
    };
    let sum: f32 = raw.iter().sum();
    raw.iter().map(|x| x / sum).collect()
}

/// Per-head KL losses (mean over covered positions, unweighted) plus the
/// β-weighted sum. Head k covers `T - k` positions; a head with no covered
/// positions contributes a constant zero.
pub fn mtp_kl_losses(
    g: &mut Graph,
    outputs: &ForwardOutputs,
    cfg: &DistillConfig,
    beta: &[f32],
) -> Result<(Vec<Value>, Value)> {
    let t = outputs.seq_len;
    let k_heads = outputs.head_logits.len();
    let mut per_head = Vec::with_capacity(k_heads);
    let mut weighted = g.constant(crate::Tensor::scalar(0.0));
    for (i, &head_logits) in outputs.head_logits.iter().enumerate() {
        let k = i + 1;
        if t <= k {
            per_head.push(g.constant(crate::Tensor::scalar(0.0)));
            continue;
        }
        let count = t - k;
        let student = g.slice_rows(head_logits, 0, count)?;
        let kl = match cfg.teacher {
            TeacherStrategy::Main => {
                let teacher = g.slice_rows(outputs.main_logits, k, count)?;
                kl_loss_rows(
                    g,
                    student,
                    teacher,
                    cfg.top_n,
                    cfg.topn_source,
                    cfg.kl_variant,
                    cfg.hybrid_lambda,
                    cfg.detach,
                )?
            }
            TeacherStrategy::EnsembleMean => {
                let teachers = teacher_slices(g, outputs, k, count)?;
                let w = teacher_weights_for(cfg, teachers.len());
                let mut mean = g.scale(teachers[0], w[0]);
                for (tv, wi) in teachers.iter().zip(&w).skip(1) {
                    let s = g.scale(*tv, *wi);
                    mean = g.add(mean, s)?;
                }
                kl_loss_rows(
                    g,
                    student,
                    mean,
                    cfg.top_n,
                    cfg.topn_source,
                    cfg.kl_variant,
                    cfg.hybrid_lambda,
                    cfg.detach,
                )?
            }
            TeacherStrategy::EnsembleSplit => {
                let teachers = teacher_slices(g, outputs, k, count)?;
                let w = teacher_weights_for(cfg, teachers.len());
                let mut acc = g.constant(crate::Tensor::scalar(0.0));
                for (tv, wi) in teachers.iter().zip(&w) {
                    let kl = kl_loss_rows(
                        g,
                        student,
                        *tv,
                        cfg.top_n,
                        cfg.topn_source,
                        cfg.kl_variant,
                        cfg.hybrid_lambda,
                        cfg.detach,
                    )?;
                    let s = g.scale(kl, *wi);
                    acc = g.add(acc, s)?;
                }
                acc
            }
        };
        per_head.push(kl);
        let scaled = g.scale(kl, beta[i]);
        weighted = g.add(weighted, scaled)?;
    }
    Ok((per_head, weighted))
}

/// Loss values still living in the graph; evaluate with [`breakdown`].
pub struct LossGraph {
    pub main_ce: Value,
    pub mtp_ce: Vec<Value>,
    pub mtp_kl: Vec<Value>,
    pub total: Value,
}

/// Evaluated per-term scalars. `total` always equals
/// `main_ce + Σ α_k·mtp_ce[k] + Σ β_k·mtp_kl[k]` up to f32 addition.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub main_ce: f32,
    pub mtp_ce: Vec<f32>,
    pub mtp_kl: Vec<f32>,
    pub total: f32,
}

/// Full objective with step-scheduled weights.
pub fn total_loss(
    g: &mut Graph,
    outputs: &ForwardOutputs,
    row: &[u16],
    cfg: &DistillConfig,
    step: u64,
) -> Result<LossGraph> {
    let t = outputs.seq_len;
    let k = outputs.head_logits.len();
    cfg.validate(k, g.shape(outputs.main_logits)[1])?;
    if row.len() != t + k + 1 {
        return Err(LossError::Misaligned {
            len: row.len(),
            t,
            k,
        });
    }
    let (alpha, beta) = weight_schedule(cfg, k, step);
    let main_ce = ce_loss(g, outputs.main_logits, &row[1..1 + t])?;
    let (mtp_ce, ce_weighted) = mtp_ce_losses(g, outputs, row, &alpha)?;
    let (mtp_kl, kl_weighted) = mtp_kl_losses(g, outputs, cfg, &beta)?;
    let partial = g.add(main_ce, ce_weighted)?;
    let total = g.add(partial, kl_weighted)?;
    Ok(LossGraph {
        main_ce,
        mtp_ce,
        mtp_kl,
        total,
    })
}

pub fn breakdown(g: &Graph, lg: &LossGraph) -> LossBreakdown {
    LossBreakdown {
        main_ce: g.value(lg.main_ce).item(),
        mtp_ce: lg.mtp_ce.iter().map(|v| g.value(*v).item()).collect(),
        mtp_kl: lg.mtp_kl.iter().map(|v| g.value(*v).item()).collect(),
        total: g.value(lg.total).item(),
    }
}
