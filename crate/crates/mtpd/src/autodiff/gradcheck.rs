//! Central-difference validation of analytic gradients.
//!
//! Both sides of the comparison run at 64-bit width over the recorded op
//! tape: the analytic side instantiates the same generic backward the f32
//! training path uses, the numeric side perturbs one leaf element at a time
//! and replays the forward program. This validates the backward formulas at
//! full sensitivity instead of drowning them in f32 cancellation noise.

use super::{AutodiffError, Graph, Value};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub passed: bool,
}

/// Compare analytic gradients of `loss` against `(f(x+h) - f(x-h)) / 2h`
/// for every element of every listed parameter leaf.
///
/// Relative error uses denominator `max(|analytic|, |numeric|, 1e-8)`.
/// An empty parameter list passes vacuously.
pub fn grad_check(
    g: &mut Graph,
    loss: Value,
    params: &[(String, Value)],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, AutodiffError> {
    if !g.backward_has_run() {
        // populate f32 gradients too, so callers can inspect the production
        // buffers after a check
        g.backward(loss)?;
    }
    let analytic = g.grads_f64(loss)?;
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for (name, v) in params {
        let base: Vec<f64> = g.value(*v).data().iter().map(|x| *x as f64).collect();
        let zeros;
        let grad: &[f64] = match &analytic[v.0 as usize] {
            Some(gv) => gv,
            None => {
                zeros = vec![0.0; base.len()];
                &zeros
            }
        };
        let mut probe = base.clone();
        for e in 0..base.len() {
            probe[e] = base[e] + h;
            let fp = g.replay_f64(loss, Some((*v, &probe)))[0];
            probe[e] = base[e] - h;
            let fm = g.replay_f64(loss, Some((*v, &probe)))[0];
            probe[e] = base[e];
            if !fp.is_finite() || !fm.is_finite() {
                return Err(AutodiffError::NonFinite { op: "grad_check" });
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{e}]");
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_param: worst,
        passed: max_rel <= tol,
    })
}
