use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Learning rate after `step` of `total_steps` updates: a linear ramp from 0
/// to `base_lr` over the first `floor(warmup_fraction · total_steps)` steps,
/// then a linear decay that reaches 0 at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, base_lr: f64, warmup_fraction: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!(
            "step {step} is past the end of a {total_steps}-step schedule"
        )));
    }
    let warm = (warmup_fraction * total_steps as f64).floor() as u64;
    if step < warm {
        return Ok(base_lr * step as f64 / warm as f64);
    }
    if warm == total_steps {
        return Ok(base_lr);
    }
    Ok(base_lr * (total_steps - step) as f64 / (total_steps - warm) as f64)
}

/// AdamW moments for one parameter tensor. `t` counts the updates this
/// parameter has received, so a block unfrozen late starts its own bias
/// correction from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub t: u64,
    #[serde(skip)]
    pub m: Vec<f32>,
    #[serde(skip)]
    pub v: Vec<f32>,
}

impl Moments {
    pub fn zeros(numel: usize) -> Self {
        Self {
            t: 0,
            m: vec![0.0; numel],
            v: vec![0.0; numel],
        }
    }
}

/// One decoupled-weight-decay Adam update, computed in f64.
///
/// `p ← p − lr·(m̂ / (√v̂ + ε) + wd·p)`; with `lr = 0` the parameter is
/// left bit-identical.
pub fn adamw_update(param: &mut [f32], grad: &[f32], mom: &mut Moments, lr: f64, weight_decay: f64) {
    debug_assert_eq!(param.len(), grad.len());
    mom.t += 1;
    let bc1 = 1.0 - BETA1.powi(mom.t as i32);
    let bc2 = 1.0 - BETA2.powi(mom.t as i32);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let m = BETA1 * mom.m[i] as f64 + (1.0 - BETA1) * g;
        let v = BETA2 * mom.v[i] as f64 + (1.0 - BETA2) * g * g;
        mom.m[i] = m as f32;
        mom.v[i] = v as f32;
        let p = param[i] as f64;
        let update = (m / bc1) / ((v / bc2).sqrt() + EPS) + weight_decay * p;
        param[i] = (p - lr * update) as f32;
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
