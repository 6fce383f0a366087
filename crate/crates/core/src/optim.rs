//! AdamW, learning-rate schedule and gradient clipping.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::{Grads, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First and second moments plus the number of updates taken so far.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Grads,
    pub v: Grads,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState { step: 0, m: Grads::zeros_like(params), v: Grads::zeros_like(params) }
    }
}

/// Biases, norm parameters and learned tokens are not decayed.
pub fn default_decay(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    !matches!(leaf, "bias" | "gamma" | "beta" | "cls_token" | "pos_embed" | "mask_token")
}

/// One AdamW update with bias correction. Decay is decoupled:
/// `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + eps)`.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &Grads,
    state: &mut AdamState,
    lr: f64,
    hp: &AdamHyper,
    decays: impl Fn(&str) -> bool,
) -> Result<()> {
    if let Some((name, offset)) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient { name, offset });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Config(format!("no gradient for parameter `{name}`")))?;
        if g.len() != p.numel() {
            return Err(Error::dim(format!("gradient for `{name}` has {} entries, parameter {}", g.len(), p.numel())));
        }
        let m = moment(&mut state.m, name, g.len());
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
        }
        let m = state.m.get(name).expect("moment present").to_vec();
        let v = moment(&mut state.v, name, g.len());
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
        }
        let shrink = if decays(name) { 1.0 - lr * hp.weight_decay } else { 1.0 };
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(&m).zip(v.iter()) {
            let update = (mi / bc1) / ((vi / bc2).sqrt() + hp.eps);
            *pi = *pi * shrink - lr * update;
        }
    }
    Ok(())
}

fn moment<'a>(store: &'a mut Grads, name: &str, len: usize) -> &'a mut Vec<f64> {
    if store.get(name).is_none() {
        store.insert(name, vec![0.0; len]);
    }
    store.get_mut(name).expect("just inserted")
}

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to 0.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Rescales `grads` so the global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
