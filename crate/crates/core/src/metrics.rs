//! Per-epoch metrics, accuracy helpers and CSV output.
//!
//! Numbers are written with 9 significant digits in a fixed, locale-free
//! format so reruns produce byte-identical files.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CSV_HEADER: [&str; 9] = ["epoch", "ls", "lp", "joint", "top1", "top5", "pos_top1", "lr", "seconds"];
pub const PRETRAIN_CSV_HEADER: [&str; 7] = ["epoch", "recon", "lp", "joint", "pos_top1", "lr", "seconds"];

/// Losses and accuracies over one pass of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub ls: f64,
    /// Absent when no position head is attached.
    pub lp: Option<f64>,
    pub joint: f64,
    pub top1: f64,
    pub top5: f64,
    pub pos_top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train: EvalMetrics,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    pub seconds: f64,
    pub val: Option<EvalMetrics>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub epochs: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub recon: f64,
    pub lp: Option<f64>,
    pub joint: f64,
    pub pos_top1: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainMetrics {
    pub epochs: Vec<PretrainEpoch>,
}

/// Running sums that become an [`EvalMetrics`].
#[derive(Debug, Clone, Default)]
pub struct Accumulator {
    pub samples: usize,
    pub ls: f64,
    pub lp: f64,
    pub has_lp: bool,
    pub top1: usize,
    pub top5: usize,
    pub pos_correct: usize,
    pub pos_total: usize,
}

impl Accumulator {
    /// Means over the accumulated samples; the joint loss is formed from the reported means.
    pub fn finish(&self, lambda: f64) -> EvalMetrics {
        let n = self.samples.max(1) as f64;
        let ls = self.ls / n;
        let lp = self.has_lp.then(|| self.lp / n);
        EvalMetrics {
            ls,
            lp,
            joint: ls + lambda * lp.unwrap_or(0.0),
            top1: self.top1 as f64 / n,
            top5: self.top5 as f64 / n,
            pos_top1: (self.pos_total > 0).then(|| self.pos_correct as f64 / self.pos_total as f64),
        }
    }
}

/// Whether `label` is among the `k` largest entries of `row`; ties go to the lower index.
pub fn in_top_k(row: &[f64], label: usize, k: usize) -> bool {
    let target = row[label];
    let rank = row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < label))
        .count();
    rank < k
}

/// Fraction of rows of `logits` whose label lies in the top `k`.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let (b, c) = logits.dims2()?;
    if k == 0 || k > c {
        return Err(Error::Config(format!("top-k needs 1 ≤ k ≤ {c}, got {k}")));
    }
    if labels.len() != b {
        return Err(Error::dim(format!("{b} logit rows but {} labels", labels.len())));
    }
    let mut hits = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Index(format!("label {y} outside {c} classes")));
        }
        if in_top_k(logits.row(r), y, k) {
            hits += 1;
        }
    }
    Ok(hits as f64 / b as f64)
}

/// Count of rows whose argmax (lowest index on ties) equals the label.
pub fn argmax_hits(logits: &Tensor, labels: &[usize]) -> usize {
    labels.iter().enumerate().filter(|&(r, &y)| in_top_k(logits.row(r), y, 1)).count()
}

/// Formats with 9 significant digits, `%g` style.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_sig).unwrap_or_default()
}

fn eval_fields(m: &EvalMetrics) -> [String; 6] {
    [fmt_sig(m.ls), opt(m.lp), fmt_sig(m.joint), fmt_sig(m.top1), fmt_sig(m.top5), opt(m.pos_top1)]
}

impl Metrics {
    /// Standard CSV; `extended` appends `val_*` columns.
    pub fn write_csv<W: Write>(&self, out: W, extended: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = CSV_HEADER.iter().map(|s| s.to_string()).collect();
        if extended {
            for h in ["ls", "lp", "joint", "top1", "top5", "pos_top1"] {
                header.push(format!("val_{h}"));
            }
        }
        w.write_record(&header)?;
        for e in &self.epochs {
            let t = eval_fields(&e.train);
            let mut row = vec![e.epoch.to_string()];
            row.extend(t);
            row.push(fmt_sig(e.lr));
            row.push(fmt_sig(e.seconds));
            if extended {
                match &e.val {
                    Some(v) => row.extend(eval_fields(v)),
                    None => row.extend(std::iter::repeat(String::new()).take(6)),
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, extended: bool) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?, extended)
    }

    pub fn to_csv_string(&self, extended: bool) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, extended).expect("in-memory write");
        String::from_utf8(buf).expect("utf-8")
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

impl PretrainMetrics {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(PRETRAIN_CSV_HEADER)?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                fmt_sig(e.recon),
                opt(e.lp),
                fmt_sig(e.joint),
                opt(e.pos_top1),
                fmt_sig(e.lr),
                fmt_sig(e.seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn last(&self) -> Option<&PretrainEpoch> {
        self.epochs.last()
    }
}
