//! Whole-model forward passes for one image and their gradient-check objectives.

use crate::config::ModelConfig;
use crate::encoder::{classify, embed, encoder_forward, init_encoder};
use crate::error::{Error, Result};
use crate::gradcheck::Objective;
use crate::graph::{Graph, Var};
use crate::mae::{mae_forward, MaskPlan};
use crate::params::{Grads, ParamSet};
use crate::position::{
    absolute_position_loss, absolute_targets, init_position_heads, joint_loss, relative_position_loss,
    PositionOutput, RelativeIndexTable,
};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

/// Encoder, classifier and whichever position heads `cfg.head_mode` enables.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut p = init_encoder(cfg, seed);
    init_position_heads(&mut p, cfg, seed);
    p
}

#[derive(Debug, Clone)]
pub struct SupervisedOutput {
    pub ls: Var,
    /// Sum of the enabled position losses.
    pub lp: Option<Var>,
    pub joint: Var,
    pub logits: Var,
    pub absolute: Option<PositionOutput>,
    pub relative: Option<PositionOutput>,
}

impl SupervisedOutput {
    /// The position prediction used for accuracy: absolute when present.
    pub fn position(&self) -> Option<&PositionOutput> {
        self.absolute.as_ref().or(self.relative.as_ref())
    }
}

/// Classification plus position losses for one patchified image.
#[allow(clippy::too_many_arguments)]
pub fn supervised_forward(
    g: &mut Graph,
    b: &crate::params::Bindings,
    patches: Var,
    label: usize,
    cfg: &ModelConfig,
    lambda: f64,
    pair_budget: Option<usize>,
    rng: &mut Rng,
) -> Result<SupervisedOutput> {
    let tokens = embed(g, b, patches, cfg)?;
    let z = encoder_forward(g, b, tokens, cfg)?;
    let logits = classify(g, b, z)?;
    let ls = g.cross_entropy(logits, &[label])?;
    let positions = absolute_targets(cfg.grid());
    let absolute = if cfg.head_mode.absolute() {
        Some(absolute_position_loss(g, b, z, &positions, cfg.num_patches())?)
    } else {
        None
    };
    let relative = if cfg.head_mode.relative() {
        let (r, c) = cfg.grid();
        Some(relative_position_loss(g, b, z, &positions, &RelativeIndexTable::new(r, c), pair_budget, rng)?)
    } else {
        None
    };
    let lp = match (&absolute, &relative) {
        (Some(a), Some(r)) => Some(g.add(a.loss, r.loss)?),
        (Some(a), None) => Some(a.loss),
        (None, Some(r)) => Some(r.loss),
        (None, None) => None,
    };
    let joint = match lp {
        Some(lp) => joint_loss(g, ls, lp, lambda)?,
        None => ls,
    };
    Ok(SupervisedOutput { ls, lp, joint, logits, absolute, relative })
}

/// Mean joint loss over a fixed set of patchified images.
#[derive(Debug, Clone)]
pub struct SupervisedObjective {
    pub cfg: ModelConfig,
    pub patches: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub lambda: f64,
    pub pair_budget: Option<usize>,
    pub seed: u64,
}

impl SupervisedObjective {
    fn run(&self, params: &ParamSet, grad: bool) -> Result<(f64, Option<Grads>)> {
        if self.patches.len() != self.labels.len() || self.patches.is_empty() {
            return Err(Error::Config("objective needs one label per image".into()));
        }
        let n = self.patches.len() as f64;
        let mut total = 0.0;
        let mut acc = grad.then(|| Grads::zeros_like(params));
        for (i, (x, &y)) in self.patches.iter().zip(&self.labels).enumerate() {
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let xv = g.constant(x.clone());
            let mut rng = stream(self.seed, "objective/pairs", &[i as u64]);
            let out = supervised_forward(&mut g, &b, xv, y, &self.cfg, self.lambda, self.pair_budget, &mut rng)?;
            let loss = g.scale(out.joint, 1.0 / n)?;
            total += g.value(loss).item();
            if let Some(acc) = acc.as_mut() {
                g.backward(loss)?;
                acc.add_assign(&b.grads(&g));
            }
        }
        Ok((total, acc))
    }
}

impl Objective for SupervisedObjective {
    fn value(&self, params: &ParamSet) -> Result<f64> {
        Ok(self.run(params, false)?.0)
    }

    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, Grads)> {
        let (v, g) = self.run(params, true)?;
        Ok((v, g.expect("gradients requested")))
    }
}

/// Mean pretraining loss `L_recon + λ·L_p^vis` over fixed images and masks.
#[derive(Debug, Clone)]
pub struct MaeObjective {
    pub cfg: ModelConfig,
    pub patches: Vec<Tensor>,
    pub plans: Vec<MaskPlan>,
    pub lambda: f64,
    pub norm_pix_loss: bool,
    pub pair_budget: Option<usize>,
    pub seed: u64,
}

impl MaeObjective {
    fn run(&self, params: &ParamSet, grad: bool) -> Result<(f64, Option<Grads>)> {
        if self.patches.len() != self.plans.len() || self.patches.is_empty() {
            return Err(Error::Config("objective needs one mask plan per image".into()));
        }
        let n = self.patches.len() as f64;
        let mut total = 0.0;
        let mut acc = grad.then(|| Grads::zeros_like(params));
        for (i, (x, plan)) in self.patches.iter().zip(&self.plans).enumerate() {
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let xv = g.constant(x.clone());
            let mut rng = stream(self.seed, "objective/pairs", &[i as u64]);
            let out = mae_forward(
                &mut g,
                &b,
                xv,
                xv,
                plan,
                &self.cfg,
                self.lambda,
                self.norm_pix_loss,
                self.pair_budget,
                &mut rng,
            )?;
            let loss = g.scale(out.total, 1.0 / n)?;
            total += g.value(loss).item();
            if let Some(acc) = acc.as_mut() {
                g.backward(loss)?;
                acc.add_assign(&b.grads(&g));
            }
        }
        Ok((total, acc))
    }
}

impl Objective for MaeObjective {
    fn value(&self, params: &ParamSet) -> Result<f64> {
        Ok(self.run(params, false)?.0)
    }

    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, Grads)> {
        let (v, g) = self.run(params, true)?;
        Ok((v, g.expect("gradients requested")))
    }
}

/// Replaces zero-initialised tensors (classifiers, PE) with small random
/// values so every parameter receives a nonzero gradient.
pub fn randomize_zero_tensors(params: &mut ParamSet, seed: u64, std: f64) {
    for (name, t) in params.iter_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            let mut rng = stream(seed, &format!("randomize/{name}"), &[]);
            t.data_mut().iter_mut().for_each(|v| *v = crate::rng::truncated_normal(&mut rng, std));
        }
    }
}

/// Redraws every tensor so pre-activations and attention logits are O(1):
/// matrices get std `1/√fan_in`, LayerNorm gains `1 ± 0.1`, everything
/// else std 0.5. A well-conditioned point for finite-difference checks,
/// where the small-init model has many gradients below the roundoff floor.
pub fn conditioned_point(params: &mut ParamSet, seed: u64) {
    for (name, t) in params.iter_mut() {
        let mut rng = stream(seed, &format!("conditioned/{name}"), &[]);
        let leaf = name.rsplit('.').next().unwrap_or(name);
        let (center, std) = if leaf == "gamma" {
            (1.0, 0.1)
        } else if t.ndim() == 2 && !matches!(leaf, "pos_embed" | "cls_token" | "mask_token") {
            (0.0, 1.0 / (t.shape()[0] as f64).sqrt())
        } else {
            (0.0, 0.5)
        };
        t.data_mut().iter_mut().for_each(|v| *v = center + crate::rng::truncated_normal(&mut rng, std));
    }
}
