//! Central finite-difference verification of analytic gradients.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::params::{Grads, ParamSet};
use crate::rng::Rng;

/// A scalar function of a parameter set with an analytic gradient.
pub trait Objective {
    fn value(&self, params: &ParamSet) -> Result<f64>;
    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, Grads)>;
}

impl<F, G> Objective for (F, G)
where
    F: Fn(&ParamSet) -> Result<f64>,
    G: Fn(&ParamSet) -> Result<(f64, Grads)>,
{
    fn value(&self, params: &ParamSet) -> Result<f64> {
        (self.0)(params)
    }

    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, Grads)> {
        (self.1)(params)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub name: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<CoordinateCheck>,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients with `(f(p + h·e) − f(p − h·e)) / 2h` on
/// `sample_count` coordinates drawn without replacement (all coordinates
/// when the parameter set is smaller).
pub fn grad_check(
    objective: &dyn Objective,
    params: &ParamSet,
    h: f64,
    sample_count: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    if sample_count == 0 {
        return Err(Error::Config("sample_count must be at least 1".into()));
    }
    let (_, grads) = objective.value_and_grad(params)?;
    let total = params.count();
    let mut coords: Vec<usize> = if sample_count >= total {
        (0..total).collect()
    } else {
        index::sample(rng, total, sample_count).into_vec()
    };
    coords.sort_unstable();

    let mut probe = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    for idx in coords {
        let orig = probe.flat_get(idx);
        probe.flat_set(idx, orig + h);
        let up = objective.value(&probe)?;
        probe.flat_set(idx, orig - h);
        let down = objective.value(&probe)?;
        probe.flat_set(idx, orig);
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { op: "grad_check objective" });
        }
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.flat_get(params, idx);
        let rel = relative_error(analytic, numeric);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            let (name, offset) = params.locate(idx);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(CoordinateCheck { name, offset, analytic, numeric, rel_error: rel });
        }
    }
    Ok(report)
}
