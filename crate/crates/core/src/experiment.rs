//! Experiment runners behind the command-line recipes. Each run writes its
//! resolved config, metrics CSVs and checkpoint into an output directory.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint, ModelKind};
use crate::config::{ExperimentConfig, HeadMode};
use crate::data::{load_dataset, Dataset};
use crate::encoder::patchify;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::mae::{finetune_init, sample_mask};
use crate::metrics::{fmt_sig, EvalMetrics, Metrics, PretrainMetrics};
use crate::model::{conditioned_point, MaeObjective, SupervisedObjective};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::train::{evaluate, pretrain_mae, train_supervised, TrainState};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_EXT_CSV: &str = "metrics_extended.csv";
pub const PRETRAIN_CSV: &str = "pretrain.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

pub const LAMBDA_SWEEP: [f64; 6] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25];
pub const MASK_RATIOS: [f64; 3] = [0.25, 0.5, 0.75];

/// One cell of a recipe grid: overrides on the base config plus the
/// values reported for it in the summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub overrides: Vec<String>,
    pub columns: Vec<(String, String)>,
}

impl Cell {
    fn new(name: impl Into<String>, overrides: &[String], columns: &[(&str, String)]) -> Self {
        Cell {
            name: name.into(),
            overrides: overrides.to_vec(),
            columns: columns.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }
}

/// `{PE off, on} × {none, apl, rpl}`.
pub fn ablate_pe_cells() -> Vec<Cell> {
    let mut cells = Vec::new();
    for pe in [false, true] {
        for mode in [HeadMode::None, HeadMode::Apl, HeadMode::Rpl] {
            let name = format!("pe-{}_{}", if pe { "on" } else { "off" }, mode.as_str());
            let ov = vec![format!("model.use_pe={pe}"), format!("model.head_mode={}", mode.as_str())];
            cells.push(Cell::new(name, &ov, &[("use_pe", pe.to_string()), ("head_mode", mode.as_str().into())]));
        }
    }
    cells
}

pub fn sweep_lambda_cells() -> Vec<Cell> {
    LAMBDA_SWEEP
        .iter()
        .map(|&l| {
            let v = fmt_sig(l);
            Cell::new(format!("lambda-{v}"), &[format!("train.lambda={v}")], &[("lambda", v)])
        })
        .collect()
}

/// Baseline `crop+hflip` without a head, then `crop`, `crop+hflip` and
/// `crop+hflip+vflip`, each with the absolute and the relative head.
pub fn ablate_augment_cells() -> Vec<Cell> {
    let mut cells = vec![Cell::new(
        "crop+hflip_none",
        &["train.augment=crop,hflip".into(), "model.head_mode=none".into()],
        &[("augment", "crop+hflip".into()), ("head_mode", "none".into())],
    )];
    for aug in ["crop", "crop,hflip", "crop,hflip,vflip"] {
        for mode in [HeadMode::Apl, HeadMode::Rpl] {
            let label = aug.replace(',', "+");
            cells.push(Cell::new(
                format!("{label}_{}", mode.as_str()),
                &[format!("train.augment={aug}"), format!("model.head_mode={}", mode.as_str())],
                &[("augment", label), ("head_mode", mode.as_str().into())],
            ));
        }
    }
    cells
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED_CONFIG), cfg.to_json_pretty())?;
    Ok(())
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>)> {
    let train = load_dataset(&cfg.dataset)?;
    let val = cfg.val_dataset.as_deref().map(load_dataset).transpose()?;
    Ok((train, val))
}

fn write_metrics(dir: &Path, metrics: &Metrics, has_val: bool) -> Result<()> {
    metrics.save_csv(&dir.join(METRICS_CSV), false)?;
    if has_val {
        metrics.save_csv(&dir.join(METRICS_EXT_CSV), true)?;
    }
    Ok(())
}

/// Supervised training. With `resume`, continues from that checkpoint.
/// Metrics CSVs are rewritten after every epoch so a diverged run keeps
/// what it completed.
pub fn run_train(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>, force: bool) -> Result<Metrics> {
    write_config(out, cfg)?;
    let (train, val) = load_data(cfg)?;
    let mut state = match resume {
        Some(dir) => load_checkpoint(dir, &cfg.model, force)?.0,
        None => TrainState::supervised(&cfg.model, cfg.train.seed),
    };
    let ckpt = out.join(CHECKPOINT_DIR);
    let has_val = val.is_some();
    let mut seen = Metrics::default();
    let metrics = train_supervised(&mut state, &cfg.model, &cfg.train, &train, val.as_ref(), &mut |e, st| {
        seen.epochs.push(e.clone());
        write_metrics(out, &seen, has_val)?;
        save_checkpoint(&ckpt, &cfg.model, ModelKind::Supervised, st)
    })?;
    write_metrics(out, &metrics, has_val)?;
    Ok(metrics)
}

/// Final-epoch values of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub train: EvalMetrics,
    pub val: Option<EvalMetrics>,
    pub epochs: usize,
}

/// Runs each cell sequentially into `out/<cell name>/` and writes `out/summary.csv`.
pub fn run_grid(base: &ExperimentConfig, base_text: &str, overrides: &[String], cells: &[Cell], out: &Path) -> Result<Vec<CellResult>> {
    write_config(out, base)?;
    let mut results = Vec::new();
    for cell in cells {
        let mut all = overrides.to_vec();
        all.extend(cell.overrides.iter().cloned());
        let cfg = ExperimentConfig::from_json_with_overrides(base_text, &all)?;
        let dir = out.join(&cell.name);
        let metrics = run_train(&cfg, &dir, None, false)?;
        let last = metrics.last().ok_or_else(|| Error::Config("run produced no epochs".into()))?;
        results.push(CellResult { cell: cell.clone(), train: last.train.clone(), val: last.val.clone(), epochs: last.epoch });
    }
    write_summary(&out.join(SUMMARY_CSV), &results)?;
    Ok(results)
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_sig).unwrap_or_default()
}

pub fn write_summary(path: &Path, results: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["cell".to_string()];
    if let Some(first) = results.first() {
        header.extend(first.cell.columns.iter().map(|(k, _)| k.clone()));
    }
    for h in ["epochs", "ls", "lp", "joint", "top1", "top5", "pos_top1", "val_top1", "val_top5", "val_pos_top1"] {
        header.push(h.into());
    }
    w.write_record(&header)?;
    for r in results {
        let mut row = vec![r.cell.name.clone()];
        row.extend(r.cell.columns.iter().map(|(_, v)| v.clone()));
        row.push(r.epochs.to_string());
        row.extend([
            fmt_sig(r.train.ls),
            opt(r.train.lp),
            fmt_sig(r.train.joint),
            fmt_sig(r.train.top1),
            fmt_sig(r.train.top5),
            opt(r.train.pos_top1),
            opt(r.val.as_ref().map(|v| v.top1)),
            opt(r.val.as_ref().map(|v| v.top5)),
            opt(r.val.as_ref().and_then(|v| v.pos_top1)),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Final pretraining values for one `(ratio, seed)` run.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainResult {
    pub ratio: f64,
    pub seed: u64,
    pub metrics: PretrainMetrics,
}

/// Masked pretraining for every `(ratio, seed)` pair; writes one CSV per run and a summary.
pub fn run_pretrain_sweep(cfg: &ExperimentConfig, ratios: &[f64], seeds: &[u64], out: &Path) -> Result<Vec<PretrainResult>> {
    write_config(out, cfg)?;
    let train = load_dataset(&cfg.dataset)?;
    let model = crate::config::ModelConfig { use_pe: false, ..cfg.model.clone() };
    let mut results = Vec::new();
    for &ratio in ratios {
        for &seed in seeds {
            let t = crate::config::TrainConfig { mask_ratio: ratio, seed, ..cfg.train.clone() };
            t.validate()?;
            let mut state = TrainState::pretrain(&model, seed)?;
            let metrics = pretrain_mae(&mut state, &model, &t, &train, &mut |_, _| Ok(()))?;
            let dir = out.join(format!("ratio-{}_seed-{seed}", fmt_sig(ratio)));
            fs::create_dir_all(&dir)?;
            metrics.save_csv(&dir.join(PRETRAIN_CSV))?;
            save_checkpoint(&dir.join(CHECKPOINT_DIR), &model, ModelKind::Pretrain, &state)?;
            results.push(PretrainResult { ratio, seed, metrics });
        }
    }
    let mut w = csv::Writer::from_path(out.join(SUMMARY_CSV))?;
    w.write_record(["mask_ratio", "seed", "epochs", "recon", "lp", "joint", "pos_top1"])?;
    for r in &results {
        let last = r.metrics.last().ok_or_else(|| Error::Config("run produced no epochs".into()))?;
        w.write_record([
            fmt_sig(r.ratio),
            r.seed.to_string(),
            last.epoch.to_string(),
            fmt_sig(last.recon),
            opt(last.lp),
            fmt_sig(last.joint),
            opt(last.pos_top1),
        ])?;
    }
    w.flush()?;
    Ok(results)
}

/// Pretrains with `cfg.train`, then fine-tunes with `cfg.finetune`
/// (falling back to `cfg.train`).
pub fn run_finetune(cfg: &ExperimentConfig, out: &Path) -> Result<(PretrainMetrics, Metrics)> {
    write_config(out, cfg)?;
    let (train, val) = load_data(cfg)?;
    let pre_model = crate::config::ModelConfig { use_pe: false, ..cfg.model.clone() };
    let mut pre = TrainState::pretrain(&pre_model, cfg.train.seed)?;
    let pm = pretrain_mae(&mut pre, &pre_model, &cfg.train, &train, &mut |_, _| Ok(()))?;
    pm.save_csv(&out.join(PRETRAIN_CSV))?;
    save_checkpoint(&out.join("pretrain_checkpoint"), &pre_model, ModelKind::Pretrain, &pre)?;

    let (params, ft_model) = finetune_init(&pre.params, &pre_model)?;
    let ft_train = cfg.finetune.clone().unwrap_or_else(|| cfg.train.clone());
    let mut state = TrainState::new(params);
    let ckpt = out.join(CHECKPOINT_DIR);
    let metrics = train_supervised(&mut state, &ft_model, &ft_train, &train, val.as_ref(), &mut |_, st| {
        save_checkpoint(&ckpt, &ft_model, ModelKind::Supervised, st)
    })?;
    write_metrics(out, &metrics, val.is_some())?;
    Ok((pm, metrics))
}

/// Evaluates a saved checkpoint on the configured validation set (or the training set).
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path, force: bool) -> Result<EvalMetrics> {
    let (state, _) = load_checkpoint(checkpoint, &cfg.model, force)?;
    let data = match &cfg.val_dataset {
        Some(v) => load_dataset(v)?,
        None => load_dataset(&cfg.dataset)?,
    };
    evaluate(&state.params, &cfg.model, &cfg.train, &data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradObjective {
    Supervised,
    Mae,
}

/// Number of images in the gradient-check objective.
pub const GRADCHECK_IMAGES: usize = 2;

/// Finite-difference check of the configured model on uniform-random
/// images, evaluated at [`conditioned_point`] rather than the small-scale
/// init. Smooth dataset images give near-identical tokens after LayerNorm,
/// which leaves attention gradients below the finite-difference noise floor.
pub fn run_gradcheck(cfg: &ExperimentConfig, objective: GradObjective, samples: usize, h: f64) -> Result<GradCheckReport> {
    let m = &cfg.model;
    m.validate()?;
    let seed = cfg.train.seed;
    let mut input_rng = stream(seed, "gradcheck/images", &[]);
    let shape = [m.image_height, m.image_width, m.channels];
    let patches = (0..GRADCHECK_IMAGES)
        .map(|_| patchify(&Tensor::from_fn(&shape, |_| input_rng.gen_range(0.0..1.0)), m.patch_size))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = (0..GRADCHECK_IMAGES).map(|_| input_rng.gen_range(0..m.num_classes)).collect();
    let mut rng = stream(seed, "gradcheck/coords", &[]);
    match objective {
        GradObjective::Supervised => {
            let mut params = TrainState::supervised(m, seed).params;
            conditioned_point(&mut params, seed);
            let obj = SupervisedObjective {
                cfg: m.clone(),
                patches,
                labels,
                lambda: cfg.train.lambda,
                pair_budget: cfg.train.pair_budget,
                seed,
            };
            grad_check(&obj, &params, h, samples, &mut rng)
        }
        GradObjective::Mae => {
            let model = crate::config::ModelConfig { use_pe: false, ..m.clone() };
            let mut params = TrainState::pretrain(&model, seed)?.params;
            conditioned_point(&mut params, seed);
            let plans = (0..patches.len())
                .map(|i| sample_mask(model.num_patches(), cfg.train.mask_ratio, seed + i as u64))
                .collect::<Result<Vec<_>>>()?;
            let obj = MaeObjective {
                cfg: model,
                patches,
                plans,
                lambda: cfg.train.lambda,
                norm_pix_loss: cfg.train.norm_pix_loss,
                pair_budget: cfg.train.pair_budget,
                seed,
            };
            grad_check(&obj, &params, h, samples, &mut rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(ablate_pe_cells().len(), 6);
        let l = sweep_lambda_cells();
        let values: Vec<&str> = l.iter().map(|c| c.columns[0].1.as_str()).collect();
        assert_eq!(values, ["0", "0.25", "0.5", "0.75", "1", "1.25"]);
        let a = ablate_augment_cells();
        assert_eq!(a.len(), 7);
        assert_eq!(a[0].name, "crop+hflip_none");
    }
}
