//! AdamW with decoupled weight decay, global-norm clipping, and the
//! warmup-stable-decay learning-rate schedule.

use super::{TrainConfig, TrainError};
use crate::autodiff::Tensor;
use crate::model::ParamStore;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrScheduleKind {
    /// Linear warmup, constant plateau, cosine tail over the final
    /// `decay_fraction` of training.
    #[default]
    Wsd,
    /// Linear warmup then a single cosine from max_lr to min_lr.
    Cosine,
}

/// First/second moment buffers, aligned with the parameter store. `step`
/// counts applied updates and drives bias correction; frozen parameters
/// keep zero moments.
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            p.entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape().to_vec()))
                .collect()
        };
        AdamW {
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay update over all trainable parameters.
/// Missing gradients are treated as zeros (decay still applies). Gradients
/// must be finite; the caller normally guarantees this via
/// [`clip_grad_norm`].
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[Option<Tensor>],
    opt: &mut AdamW,
    lr: f64,
    cfg: &TrainConfig,
    trainable: &[bool],
) -> Result<(), TrainError> {
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2, eps, wd) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let lr = lr as f32;
    for i in 0..params.len() {
        if !trainable[i] {
            continue;
        }
        let name_for_err = || params.entries()[i].name.clone();
        if let Some(g) = &grads[i] {
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient { param: name_for_err() });
            }
        }
        let zeros;
        let g: &[f32] = match &grads[i] {
            Some(g) => g.data(),
            None => {
                zeros = vec![0.0f32; params.tensor(i).numel()];
                &zeros
            }
        };
        let m = opt.m[i].data_mut();
        let v = opt.v[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (1.0 - b1) * gj;
        }
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
        }
        let w = params.tensor_mut(i).data_mut();
        for j in 0..w.len() {
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            w[j] -= lr * wd * w[j] + lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scale all trainable gradients so the global L2 norm is at most
/// `max_norm`; returns the observed pre-clip norm. The norm accumulates in
/// f64 over a fixed parameter order.
pub fn clip_grad_norm(
    grads: &mut [Option<Tensor>],
    trainable: &[bool],
    max_norm: f32,
) -> Result<f64, TrainError> {
    let mut sq = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        if !trainable[i] {
            continue;
        }
        if let Some(g) = g {
            for x in g.data() {
                sq += (*x as f64) * (*x as f64);
            }
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(TrainError::NonFiniteGradNorm);
    }
    if norm > max_norm as f64 && norm > 0.0 {
        let scale = (max_norm as f64 / norm) as f32;
        for (i, g) in grads.iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            if let Some(g) = g {
                for x in g.data_mut() {
                    *x *= scale;
                }
            }
        }
    }
    Ok(norm)
}

/// Learning rate at `step`. Warmup rises linearly from zero; the plateau
/// holds max_lr; the tail decays along a cosine to min_lr, covering the
/// final `decay_fraction` of `total_steps` (Wsd) or everything after
/// warmup (Cosine). Evaluated in f64.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let (max, min) = (cfg.max_lr, cfg.min_lr);
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return max * step as f64 / cfg.warmup_steps as f64;
    }
    let cosine = |u: f64| min + (max - min) * (1.0 + (std::f64::consts::PI * u).cos()) / 2.0;
    match cfg.lr_schedule {
        LrScheduleKind::Wsd => {
            let decay_steps = ((cfg.decay_fraction * cfg.total_steps as f64).round() as u64).max(1);
            let decay_start = cfg.total_steps.saturating_sub(decay_steps);
            if step < decay_start {
                max
            } else {
                let u = (step - decay_start) as f64 / decay_steps as f64;
                cosine(u.min(1.0))
            }
        }
        LrScheduleKind::Cosine => {
            let span = (cfg.total_steps - cfg.warmup_steps).max(1);
            let u = (step.saturating_sub(cfg.warmup_steps)) as f64 / span as f64;
            cosine(u.min(1.0))
        }
    }
}
