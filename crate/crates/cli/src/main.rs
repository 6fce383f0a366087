use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vitpos::experiment::{
    ablate_augment_cells, ablate_pe_cells, run_eval, run_finetune, run_gradcheck, run_grid, run_pretrain_sweep,
    run_train, sweep_lambda_cells, GradObjective, MASK_RATIOS,
};
use vitpos::metrics::fmt_sig;
use vitpos::{Error, ExperimentConfig};

/// Vision-transformer experiments with positional-label supervision.
#[derive(Parser, Debug)]
#[command(name = "vitpos", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override; dotted (`train.lambda`) or a unique bare key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Supervised joint training.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Load a checkpoint even if its config hash differs.
        #[arg(long)]
        force: bool,
    },
    /// Masked pretraining followed by supervised fine-tuning.
    Finetune {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = ObjectiveArg::Supervised)]
        objective: ObjectiveArg,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// {PE off, on} × {no head, absolute, relative}.
    AblatePe {
        #[command(flatten)]
        common: Common,
    },
    /// λ ∈ {0, 0.25, 0.5, 0.75, 1, 1.25}.
    SweepLambda {
        #[command(flatten)]
        common: Common,
    },
    /// Augmentation × head grid.
    AblateAugment {
        #[command(flatten)]
        common: Common,
    },
    /// Masked pretraining for each mask ratio and seed.
    PretrainMae {
        #[command(flatten)]
        common: Common,
        #[arg(long = "mask-ratio", value_delimiter = ',')]
        mask_ratio: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
        seeds: Vec<u64>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ObjectiveArg {
    Supervised,
    Mae,
}

/// Config text plus the overrides that resolve it.
struct Resolved {
    text: String,
    overrides: Vec<String>,
    config: ExperimentConfig,
}

fn resolve(common: &Common, recipe: &str) -> Result<Resolved, Error> {
    let text = match &common.config {
        Some(p) => fs::read_to_string(p)?,
        None => "{}".to_string(),
    };
    let mut overrides = common.overrides.clone();
    overrides.push(format!("recipe={recipe}"));
    if let Some(out) = &common.out {
        overrides.push(format!("output_dir={}", out.display()));
    }
    let config = ExperimentConfig::from_json_with_overrides(&text, &overrides)?;
    Ok(Resolved { text, overrides, config })
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from(&cfg.output_dir)
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Train { common, resume, force } => {
            let r = resolve(&common, "train")?;
            let m = run_train(&r.config, &out_dir(&r.config), resume.as_deref(), force)?;
            if let Some(last) = m.last() {
                println!(
                    "epoch {}: joint {} top1 {} pos_top1 {}",
                    last.epoch,
                    fmt_sig(last.train.joint),
                    fmt_sig(last.train.top1),
                    last.train.pos_top1.map(fmt_sig).unwrap_or_else(|| "-".into())
                );
            }
        }
        Command::Finetune { common } => {
            let r = resolve(&common, "finetune")?;
            let (_, m) = run_finetune(&r.config, &out_dir(&r.config))?;
            if let Some(last) = m.last() {
                println!("fine-tune epoch {}: top1 {}", last.epoch, fmt_sig(last.train.top1));
            }
        }
        Command::Eval { common, checkpoint, force } => {
            let r = resolve(&common, "eval")?;
            let m = run_eval(&r.config, &checkpoint, force)?;
            println!("ls,lp,joint,top1,top5,pos_top1");
            let opt = |x: Option<f64>| x.map(fmt_sig).unwrap_or_default();
            println!(
                "{},{},{},{},{},{}",
                fmt_sig(m.ls),
                opt(m.lp),
                fmt_sig(m.joint),
                fmt_sig(m.top1),
                fmt_sig(m.top5),
                opt(m.pos_top1)
            );
        }
        Command::Gradcheck { common, objective, samples, step, tolerance } => {
            let r = resolve(&common, "gradcheck")?;
            let obj = match objective {
                ObjectiveArg::Supervised => GradObjective::Supervised,
                ObjectiveArg::Mae => GradObjective::Mae,
            };
            let report = run_gradcheck(&r.config, obj, samples, step)?;
            println!("checked {} coordinates, max relative error {:.3e}", report.checked, report.max_rel_error);
            if let Some(w) = &report.worst {
                println!(
                    "worst: {}[{}] analytic {:.6e} numeric {:.6e}",
                    w.name, w.offset, w.analytic, w.numeric
                );
            }
            if !(report.max_rel_error < tolerance) {
                eprintln!("gradient check failed: {:.3e} is not below {tolerance:.1e}", report.max_rel_error);
                return Ok(1);
            }
        }
        Command::AblatePe { common } => grid(&common, "ablate-pe", &ablate_pe_cells())?,
        Command::SweepLambda { common } => grid(&common, "sweep-lambda", &sweep_lambda_cells())?,
        Command::AblateAugment { common } => grid(&common, "ablate-augment", &ablate_augment_cells())?,
        Command::PretrainMae { common, mask_ratio, seeds } => {
            let r = resolve(&common, "pretrain-mae")?;
            let ratios = if mask_ratio.is_empty() { MASK_RATIOS.to_vec() } else { mask_ratio };
            let results = run_pretrain_sweep(&r.config, &ratios, &seeds, &out_dir(&r.config))?;
            for res in &results {
                if let Some(last) = res.metrics.last() {
                    println!(
                        "ratio {} seed {}: recon {} lp {}",
                        fmt_sig(res.ratio),
                        res.seed,
                        fmt_sig(last.recon),
                        last.lp.map(fmt_sig).unwrap_or_else(|| "-".into())
                    );
                }
            }
        }
    }
    Ok(0)
}

fn grid(common: &Common, recipe: &str, cells: &[vitpos::experiment::Cell]) -> Result<(), Error> {
    let r = resolve(common, recipe)?;
    let out = out_dir(&r.config);
    let results = run_grid(&r.config, &r.text, &r.overrides, cells, &out)?;
    println!("{} cells written to {}", results.len(), Path::new(&out).display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Diverged { partial, .. } = &e {
                eprintln!("{} epochs completed before divergence", partial.epochs.len());
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
