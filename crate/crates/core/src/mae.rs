//! Masked-autoencoder pretraining with a positional-label head on the
//! visible-patch encodings.
//!
//! The encoder runs without positional encoding and sees only the visible
//! patches. Its output feeds both a shallow pixel decoder and the position
//! head; the position targets are the visible patches' original raster
//! indices. [`finetune_init`] then adds a zero positional encoding and drops
//! the decoder and heads.

use rand::seq::index;

use crate::config::ModelConfig;
use crate::encoder::{block, block_shapes, embed, encoder_forward, encoder_shapes, init_shapes, layernorm, linear};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bindings, ParamSet};
use crate::position::{
    absolute_position_loss, init_position_heads, relative_position_loss, PositionOutput, RelativeIndexTable,
    APL_PREFIX, RPL_PREFIX,
};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

pub const DECODER_PREFIX: &str = "decoder";

/// Visible/masked split of `0..num_patches`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub num_patches: usize,
    pub ratio: f64,
    /// Sorted masked indices.
    pub masked: Vec<usize>,
    /// Visible indices in raster order.
    pub visible: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    /// Absolute position targets of the visible patches (their raster indices).
    pub fn position_targets(&self) -> &[usize] {
        &self.visible
    }
}

/// Masks `round(ratio·n)` patches chosen uniformly without replacement.
pub fn sample_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let count = (ratio * n as f64).round() as usize;
    if count >= n {
        return Err(Error::Config(format!("mask ratio {ratio} leaves no visible patch out of {n}")));
    }
    let mut rng = stream(seed, "mask", &[n as u64]);
    let mut masked = index::sample(&mut rng, n, count).into_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; n];
    for &m in &masked {
        is_masked[m] = true;
    }
    let visible = (0..n).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan { num_patches: n, ratio, masked, visible, seed })
}

pub fn decoder_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let dd = cfg.decoder_dim();
    let p = |s: &str| format!("{DECODER_PREFIX}.{s}");
    let mut shapes = vec![
        (p("embed.weight"), vec![cfg.embed_dim, dd]),
        (p("embed.bias"), vec![dd]),
        (p("mask_token"), vec![1, dd]),
        (p("pos_embed"), vec![cfg.num_patches() + 1, dd]),
    ];
    for i in 0..cfg.decoder_depth {
        shapes.extend(block_shapes(&p(&format!("blocks.{i}")), dd, dd * cfg.mlp_ratio));
    }
    shapes.push((p("norm.gamma"), vec![dd]));
    shapes.push((p("norm.beta"), vec![dd]));
    shapes.push((p("pred.weight"), vec![dd, cfg.patch_dim()]));
    shapes.push((p("pred.bias"), vec![cfg.patch_dim()]));
    shapes
}

/// Pretraining parameters: PE-free encoder (with its classifier, unused
/// until fine-tuning), decoder, and the enabled position heads.
pub fn init_pretrain(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    if cfg.use_pe {
        return Err(Error::Config("pretraining runs without encoder positional encoding".into()));
    }
    let mut p = ParamSet::new();
    init_shapes(&mut p, seed, &encoder_shapes(cfg));
    init_shapes(&mut p, seed, &decoder_shapes(cfg));
    init_position_heads(&mut p, cfg, seed);
    Ok(p)
}

/// Losses of one masked-autoencoder forward pass.
#[derive(Debug, Clone)]
pub struct MaeOutput {
    /// Mean squared pixel error over the masked patches (0 when none are masked).
    pub recon: Var,
    /// Position loss on the visible patches, if a head is enabled.
    pub position_loss: Option<Var>,
    pub absolute: Option<PositionOutput>,
    pub relative: Option<PositionOutput>,
    /// `recon + λ·position_loss`
    pub total: Var,
    /// Raw decoder predictions for every token row, class token included.
    pub prediction: Var,
}

/// Runs encoder, decoder and position head for one image.
///
/// `patches` feeds the encoder and `target` supplies the reconstruction
/// target; callers usually pass the same variable for both.
#[allow(clippy::too_many_arguments)]
pub fn mae_forward(
    g: &mut Graph,
    b: &Bindings,
    patches: Var,
    target: Var,
    plan: &MaskPlan,
    cfg: &ModelConfig,
    lambda: f64,
    norm_pix_loss: bool,
    pair_budget: Option<usize>,
    rng: &mut Rng,
) -> Result<MaeOutput> {
    if cfg.use_pe {
        return Err(Error::Config("pretraining runs without encoder positional encoding".into()));
    }
    let n = cfg.num_patches();
    let (rows, _) = g.value(patches).dims2()?;
    if rows != n || plan.num_patches != n || g.shape(target) != g.shape(patches) {
        return Err(Error::dim(format!(
            "mask plan over {} patches, image has {rows}, config expects {n}",
            plan.num_patches
        )));
    }

    let visible = g.gather_rows(patches, &plan.visible)?;
    let tokens = embed(g, b, visible, cfg)?;
    let z = encoder_forward(g, b, tokens, cfg)?;

    let absolute = if cfg.head_mode.absolute() {
        Some(absolute_position_loss(g, b, z, &plan.visible, n)?)
    } else {
        None
    };
    let relative = if cfg.head_mode.relative() {
        let (r, c) = cfg.grid();
        let table = RelativeIndexTable::new(r, c);
        Some(relative_position_loss(g, b, z, &plan.visible, &table, pair_budget, rng)?)
    } else {
        None
    };
    let position_loss = match (&absolute, &relative) {
        (Some(a), Some(r)) => Some(g.add(a.loss, r.loss)?),
        (Some(a), None) => Some(a.loss),
        (None, Some(r)) => Some(r.loss),
        (None, None) => None,
    };

    let prediction = decoder_forward(g, b, z, plan, cfg)?;
    let recon = if plan.masked.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let pred_rows: Vec<usize> = plan.masked.iter().map(|m| m + 1).collect();
        let pred = g.gather_rows(prediction, &pred_rows)?;
        let mut tgt = g.gather_rows(target, &plan.masked)?;
        if norm_pix_loss {
            let p = cfg.patch_dim();
            let one = g.constant(Tensor::ones(&[p]));
            let zero = g.constant(Tensor::zeros(&[p]));
            tgt = g.layernorm(tgt, one, zero, 1e-6)?;
        }
        let diff = g.sub(pred, tgt)?;
        let sq = g.mul(diff, diff)?;
        g.mean(sq)?
    };

    let total = match position_loss {
        Some(lp) => {
            let w = g.scale(lp, lambda)?;
            g.add(recon, w)?
        }
        None => recon,
    };
    Ok(MaeOutput { recon, position_loss, absolute, relative, total, prediction })
}

/// Re-interleaves encoded visible tokens with mask tokens, adds the
/// decoder positional encoding and predicts pixels for every row.
fn decoder_forward(g: &mut Graph, b: &Bindings, z: Var, plan: &MaskPlan, cfg: &ModelConfig) -> Result<Var> {
    let dv = linear(g, b, &format!("{DECODER_PREFIX}.embed"), z)?;
    let mask_token = b.var(&format!("{DECODER_PREFIX}.mask_token"))?;
    let pool = g.concat(&[dv, mask_token], 0)?;
    let mask_row = plan.visible.len() + 1;
    let mut slot = vec![mask_row; plan.num_patches + 1];
    slot[0] = 0;
    for (k, &v) in plan.visible.iter().enumerate() {
        slot[v + 1] = k + 1;
    }
    let full = g.gather_rows(pool, &slot)?;
    let mut x = g.add(full, b.var(&format!("{DECODER_PREFIX}.pos_embed"))?)?;
    for i in 0..cfg.decoder_depth {
        x = block(g, b, &format!("{DECODER_PREFIX}.blocks.{i}"), x, cfg.decoder_heads)?.0;
    }
    let x = layernorm(g, b, &format!("{DECODER_PREFIX}.norm"), x)?;
    linear(g, b, &format!("{DECODER_PREFIX}.pred"), x)
}

/// Converts pretrained parameters for fine-tuning: appends a zero
/// positional encoding and drops the decoder and position heads.
///
/// Returns the parameters and the fine-tuning model config (`use_pe` on,
/// no position head).
pub fn finetune_init(pretrained: &ParamSet, cfg: &ModelConfig) -> Result<(ParamSet, ModelConfig)> {
    if pretrained.contains("pos_embed") {
        return Err(Error::Config("pretrained parameters already carry a positional encoding".into()));
    }
    let mut params = pretrained.clone();
    params.remove_prefix(&format!("{DECODER_PREFIX}."));
    params.remove_prefix(&format!("{APL_PREFIX}."));
    params.remove_prefix(&format!("{RPL_PREFIX}."));
    params.insert("pos_embed", Tensor::zeros(&[cfg.num_patches() + 1, cfg.embed_dim]));
    if !params.contains("head.weight") {
        params.insert("head.weight", Tensor::zeros(&[cfg.embed_dim, cfg.num_classes]));
    }
    let ft_cfg = ModelConfig { use_pe: true, head_mode: crate::config::HeadMode::None, ..cfg.clone() };
    Ok((params, ft_cfg))
}
