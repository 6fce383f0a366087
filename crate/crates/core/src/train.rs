//! Supervised joint training, masked pretraining and the pretrain → fine-tune chain.
//!
//! Every sample gets its own graph; batch gradients are summed in sample
//! order and averaged. Shuffling, augmentation, masking and pair sampling
//! draw from named streams indexed by epoch and sample, so a run resumed
//! from a checkpoint replays exactly what an unbroken run would have done.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::augment::augment;
use crate::config::{ModelConfig, TrainConfig};
use crate::data::Dataset;
use crate::encoder::patchify;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mae::{finetune_init, init_pretrain, mae_forward, sample_mask};
use crate::metrics::{argmax_hits, in_top_k, Accumulator, EpochMetrics, EvalMetrics, Metrics, PretrainEpoch, PretrainMetrics};
use crate::model::{init_model, supervised_forward};
use crate::optim::{adamw_step, clip_global_norm, default_decay, lr_at, AdamHyper, AdamState};
use crate::params::{Grads, ParamSet};
use crate::rng::stream;

/// Parameters, optimizer moments and completed-epoch count.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamSet,
    pub optim: AdamState,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(params: ParamSet) -> Self {
        let optim = AdamState::new(&params);
        TrainState { params, optim, epoch: 0 }
    }

    /// Fresh supervised model.
    pub fn supervised(cfg: &ModelConfig, seed: u64) -> Self {
        TrainState::new(init_model(cfg, seed))
    }

    /// Fresh pretraining model (PE-free encoder, decoder, heads).
    pub fn pretrain(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(TrainState::new(init_pretrain(cfg, seed)?))
    }
}

/// Per-epoch hook, called after each epoch with the updated state.
pub type EpochHook<'a, M> = &'a mut dyn FnMut(&M, &TrainState) -> Result<()>;

fn check_data(cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if (data.height, data.width, data.channels) != (cfg.image_height, cfg.image_width, cfg.channels) {
        return Err(Error::Config(format!(
            "dataset images are {}×{}×{}, model expects {}×{}×{}",
            data.height, data.width, data.channels, cfg.image_height, cfg.image_width, cfg.channels
        )));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= cfg.num_classes) {
        return Err(Error::Config(format!("label {bad} outside {} classes", cfg.num_classes)));
    }
    Ok(())
}

fn hyper(t: &TrainConfig) -> AdamHyper {
    AdamHyper { beta1: t.beta1, beta2: t.beta2, eps: t.adam_eps, weight_decay: t.weight_decay }
}

fn is_numeric_failure(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::NonFiniteGradient { .. })
}

/// Statistics of one supervised sample.
struct SampleStats {
    ls: f64,
    lp: Option<f64>,
    joint: f64,
    top1: bool,
    top5: bool,
    pos_correct: usize,
    pos_total: usize,
}

fn supervised_sample(
    params: &ParamSet,
    cfg: &ModelConfig,
    t: &TrainConfig,
    image: &crate::tensor::Tensor,
    label: usize,
    pair_seed: (&str, &[u64]),
    want_grad: bool,
) -> Result<(SampleStats, Option<Grads>)> {
    let patches = patchify(image, cfg.patch_size)?;
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let x = g.constant(patches);
    let mut rng = stream(t.seed, pair_seed.0, pair_seed.1);
    let out = supervised_forward(&mut g, &b, x, label, cfg, t.lambda, t.pair_budget, &mut rng)?;
    let logits = g.value(out.logits);
    let k5 = 5.min(cfg.num_classes);
    let (pos_correct, pos_total) = match out.position() {
        Some(p) => (argmax_hits(g.value(p.logits), &p.targets), p.targets.len()),
        None => (0, 0),
    };
    let stats = SampleStats {
        ls: g.value(out.ls).item(),
        lp: out.lp.map(|v| g.value(v).item()),
        joint: g.value(out.joint).item(),
        top1: in_top_k(logits.row(0), label, 1),
        top5: in_top_k(logits.row(0), label, k5),
        pos_correct,
        pos_total,
    };
    let grads = if want_grad {
        g.backward(out.joint)?;
        Some(b.grads(&g))
    } else {
        None
    };
    Ok((stats, grads))
}

fn record(acc: &mut Accumulator, s: &SampleStats) {
    acc.samples += 1;
    acc.ls += s.ls;
    if let Some(lp) = s.lp {
        acc.lp += lp;
        acc.has_lp = true;
    }
    acc.top1 += s.top1 as usize;
    acc.top5 += s.top5 as usize;
    acc.pos_correct += s.pos_correct;
    acc.pos_total += s.pos_total;
}

/// Losses and accuracies without augmentation or updates.
pub fn evaluate(params: &ParamSet, cfg: &ModelConfig, t: &TrainConfig, data: &Dataset) -> Result<EvalMetrics> {
    check_data(cfg, data)?;
    let mut acc = Accumulator::default();
    for (i, (img, &y)) in data.images.iter().zip(&data.labels).enumerate() {
        let (s, _) = supervised_sample(params, cfg, t, img, y, ("eval/pairs", &[i as u64]), false)?;
        record(&mut acc, &s);
    }
    Ok(acc.finish(t.lambda))
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "shuffle", &[epoch as u64]));
    order
}

fn apply_update(
    state: &mut TrainState,
    mut grads: Grads,
    count: usize,
    t: &TrainConfig,
    lr: f64,
) -> Result<()> {
    grads.scale(1.0 / count as f64);
    if let Some((name, offset)) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient { name, offset });
    }
    clip_global_norm(&mut grads, t.grad_clip);
    adamw_step(&mut state.params, &grads, &mut state.optim, lr, &hyper(t), default_decay)
}

/// Runs supervised joint training from `state.epoch` up to `t.epochs`.
///
/// On a non-finite loss or gradient the run stops with
/// [`Error::Diverged`], carrying the metrics of the completed epochs.
pub fn train_supervised(
    state: &mut TrainState,
    cfg: &ModelConfig,
    t: &TrainConfig,
    data: &Dataset,
    val: Option<&Dataset>,
    on_epoch: EpochHook<'_, EpochMetrics>,
) -> Result<Metrics> {
    cfg.validate()?;
    t.validate()?;
    check_data(cfg, data)?;
    if let Some(v) = val {
        check_data(cfg, v)?;
    }
    let n = data.len();
    let spe = steps_per_epoch(n, t.batch_size);
    let total_steps = spe * t.epochs;
    let warmup = spe * t.warmup_epochs;
    let mut metrics = Metrics::default();

    for epoch in state.epoch..t.epochs {
        let started = Instant::now();
        let order = epoch_order(t.seed, epoch, n);
        let mut acc = Accumulator::default();
        let mut lr = 0.0;
        for (step_in_epoch, batch) in order.chunks(t.batch_size).enumerate() {
            let step = epoch * spe + step_in_epoch;
            let mut grads = Grads::zeros_like(&state.params);
            for &idx in batch {
                let mut aug_rng = stream(t.seed, "augment", &[epoch as u64, idx as u64]);
                let image = augment(&data.images[idx], &t.augment, &mut aug_rng)?;
                let path = [epoch as u64, idx as u64];
                let result =
                    supervised_sample(&state.params, cfg, t, &image, data.labels[idx], ("pairs", &path), true);
                let (s, g) = match result {
                    Ok(r) => r,
                    Err(e) if is_numeric_failure(&e) => {
                        return Err(diverged(epoch, step, e.to_string(), metrics));
                    }
                    Err(e) => return Err(e),
                };
                if !s.joint.is_finite() {
                    return Err(diverged(epoch, step, format!("loss {}", s.joint), metrics));
                }
                record(&mut acc, &s);
                grads.add_assign(&g.expect("gradients requested"));
            }
            lr = lr_at(step, total_steps, warmup, t.base_lr);
            if let Err(e) = apply_update(state, grads, batch.len(), t, lr) {
                if is_numeric_failure(&e) {
                    return Err(diverged(epoch, step, e.to_string(), metrics));
                }
                return Err(e);
            }
        }
        state.epoch = epoch + 1;
        let val_metrics = match val {
            Some(v) => Some(evaluate(&state.params, cfg, t, v)?),
            None => None,
        };
        let em = EpochMetrics {
            epoch: epoch + 1,
            train: acc.finish(t.lambda),
            lr,
            seconds: if t.log_wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
            val: val_metrics,
        };
        on_epoch(&em, state)?;
        metrics.epochs.push(em);
    }
    Ok(metrics)
}

fn diverged(epoch: usize, step: usize, reason: String, partial: Metrics) -> Error {
    Error::Diverged { epoch: epoch + 1, step, reason, partial: Box::new(partial) }
}

/// Masked-autoencoder pretraining with the position head on visible patches.
pub fn pretrain_mae(
    state: &mut TrainState,
    cfg: &ModelConfig,
    t: &TrainConfig,
    data: &Dataset,
    on_epoch: EpochHook<'_, PretrainEpoch>,
) -> Result<PretrainMetrics> {
    cfg.validate()?;
    t.validate()?;
    check_data(cfg, data)?;
    let n = data.len();
    let np = cfg.num_patches();
    let spe = steps_per_epoch(n, t.batch_size);
    let total_steps = spe * t.epochs;
    let warmup = spe * t.warmup_epochs;
    let mut metrics = PretrainMetrics::default();

    for epoch in state.epoch..t.epochs {
        let started = Instant::now();
        let order = epoch_order(t.seed, epoch, n);
        let (mut recon_sum, mut lp_sum, mut has_lp) = (0.0, 0.0, false);
        let (mut pos_correct, mut pos_total) = (0usize, 0usize);
        let mut lr = 0.0;
        for (step_in_epoch, batch) in order.chunks(t.batch_size).enumerate() {
            let step = epoch * spe + step_in_epoch;
            let mut grads = Grads::zeros_like(&state.params);
            for &idx in batch {
                let path = [epoch as u64, idx as u64];
                let image = augment(&data.images[idx], &t.augment, &mut stream(t.seed, "augment", &path))?;
                let mask_seed: u64 = stream(t.seed, "mask", &path).gen();
                let plan = sample_mask(np, t.mask_ratio, mask_seed)?;
                let mut g = Graph::new();
                let b = state.params.bind(&mut g);
                let x = g.constant(patchify(&image, cfg.patch_size)?);
                let mut rng = stream(t.seed, "pairs", &path);
                let out = match mae_forward(
                    &mut g,
                    &b,
                    x,
                    x,
                    &plan,
                    cfg,
                    t.lambda,
                    t.norm_pix_loss,
                    t.pair_budget,
                    &mut rng,
                ) {
                    Ok(o) => o,
                    Err(e) if is_numeric_failure(&e) => {
                        return Err(diverged(epoch, step, e.to_string(), Metrics::default()));
                    }
                    Err(e) => return Err(e),
                };
                let total = g.value(out.total).item();
                if !total.is_finite() {
                    return Err(diverged(epoch, step, format!("loss {total}"), Metrics::default()));
                }
                recon_sum += g.value(out.recon).item();
                if let Some(lp) = out.position_loss {
                    lp_sum += g.value(lp).item();
                    has_lp = true;
                }
                if let Some(p) = out.absolute.as_ref().or(out.relative.as_ref()) {
                    pos_correct += argmax_hits(g.value(p.logits), &p.targets);
                    pos_total += p.targets.len();
                }
                g.backward(out.total)?;
                grads.add_assign(&b.grads(&g));
            }
            lr = lr_at(step, total_steps, warmup, t.base_lr);
            if let Err(e) = apply_update(state, grads, batch.len(), t, lr) {
                if is_numeric_failure(&e) {
                    return Err(diverged(epoch, step, e.to_string(), Metrics::default()));
                }
                return Err(e);
            }
        }
        state.epoch = epoch + 1;
        let recon = recon_sum / n as f64;
        let lp = has_lp.then(|| lp_sum / n as f64);
        let pe = PretrainEpoch {
            epoch: epoch + 1,
            recon,
            lp,
            joint: recon + t.lambda * lp.unwrap_or(0.0),
            pos_top1: (pos_total > 0).then(|| pos_correct as f64 / pos_total as f64),
            lr,
            seconds: if t.log_wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
        };
        on_epoch(&pe, state)?;
        metrics.epochs.push(pe);
    }
    Ok(metrics)
}

/// Result of [`pretrain_then_finetune`].
#[derive(Debug, Clone)]
pub struct PretrainFinetune {
    pub pretrain: PretrainMetrics,
    pub finetune: Metrics,
    pub finetune_config: ModelConfig,
    pub state: TrainState,
}

/// Pretrains a PE-free model, attaches a zero positional encoding, drops
/// the decoder and heads, then fine-tunes with supervision.
pub fn pretrain_then_finetune(
    cfg: &ModelConfig,
    pretrain_cfg: &TrainConfig,
    finetune_cfg: &TrainConfig,
    data: &Dataset,
    val: Option<&Dataset>,
) -> Result<PretrainFinetune> {
    let pre_model = ModelConfig { use_pe: false, ..cfg.clone() };
    let mut pre_state = TrainState::pretrain(&pre_model, pretrain_cfg.seed)?;
    let pretrain = pretrain_mae(&mut pre_state, &pre_model, pretrain_cfg, data, &mut |_, _| Ok(()))?;
    let (params, ft_model) = finetune_init(&pre_state.params, &pre_model)?;
    let mut state = TrainState::new(params);
    let finetune = train_supervised(&mut state, &ft_model, finetune_cfg, data, val, &mut |_, _| Ok(()))?;
    Ok(PretrainFinetune { pretrain, finetune, finetune_config: ft_model, state })
}
