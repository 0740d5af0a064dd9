//! Central-difference verification of the analytic gradients.

use std::fmt;

use rayon::prelude::*;

use super::{dataset_loss, model_gradient};
use crate::error::{Error, Result};
use crate::model::DiffusionModel;
use crate::speckle::NoisyPair;

/// Relative finite-difference step.
const REL_STEP: f64 = 1e-5;

/// Components whose magnitude is below this fraction of the largest analytic
/// component are compared against that floor instead of their own size.
const NOISE_FLOOR: f64 = 1e-6;

/// Largest relative error per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub beta: f64,
    pub filters: f64,
    pub influences: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Index (flattened layout) of the worst component.
    pub worst_index: usize,
    pub parameters: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.beta.max(self.filters).max(self.influences)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "params={} beta={:.3e} filters={:.3e} rbf={:.3e} tol={:.1e} worst={} {}",
            self.parameters,
            self.beta,
            self.filters,
            self.influences,
            self.tolerance,
            self.worst_index,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Copy)]
enum Group {
    Beta,
    Filter,
    Rbf,
}

fn groups(model: &DiffusionModel) -> Vec<Group> {
    let mut out = Vec::with_capacity(model.param_count());
    for s in &model.stages {
        out.push(Group::Beta);
        for f in &s.filters {
            out.extend(std::iter::repeat_n(Group::Filter, f.len()));
        }
        for phi in &s.influences {
            out.extend(std::iter::repeat_n(Group::Rbf, phi.len()));
        }
    }
    out
}

/// Central differences of the per-sample loss at `u_T` for every parameter.
pub(crate) fn numeric_gradient(model: &DiffusionModel, pair: &NoisyPair) -> Result<Vec<f64>> {
    let theta = model.to_vec();
    let samples = std::slice::from_ref(pair);
    (0..theta.len())
        .into_par_iter()
        .map(|j| {
            let h = REL_STEP * theta[j].abs().max(1.0);
            let mut m = model.clone();
            let mut v = theta.clone();
            v[j] = theta[j] + h;
            m.set_from_slice(&v);
            let up = dataset_loss(&m, samples)?;
            v[j] = theta[j] - h;
            m.set_from_slice(&v);
            let down = dataset_loss(&m, samples)?;
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// Compares `analytic` against central differences and reports per-group
/// maximum relative errors.
pub fn compare_gradients(
    model: &DiffusionModel,
    pair: &NoisyPair,
    analytic: &[f64],
    tolerance: f64,
) -> Result<GradCheckReport> {
    if analytic.len() != model.param_count() {
        return Err(Error::Parameter(format!(
            "gradient has {} entries, model has {} parameters",
            analytic.len(),
            model.param_count()
        )));
    }
    let numeric = numeric_gradient(model, pair)?;
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (NOISE_FLOOR * scale).max(f64::MIN_POSITIVE);
    let mut report = GradCheckReport {
        beta: 0.0,
        filters: 0.0,
        influences: 0.0,
        tolerance,
        passed: true,
        worst_index: 0,
        parameters: analytic.len(),
    };
    let mut worst = -1.0;
    for (j, ((a, n), g)) in analytic.iter().zip(&numeric).zip(groups(model)).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        let slot = match g {
            Group::Beta => &mut report.beta,
            Group::Filter => &mut report.filters,
            Group::Rbf => &mut report.influences,
        };
        *slot = slot.max(err);
        if err > worst {
            worst = err;
            report.worst_index = j;
        }
    }
    report.passed = report.max_error() < tolerance;
    Ok(report)
}

/// Checks the backpropagated gradient of `½‖u_T − u_gt‖²` on one pair.
pub fn finite_diff_check(
    model: &DiffusionModel,
    pair: &NoisyPair,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = model_gradient(model, std::slice::from_ref(pair))?;
    compare_gradients(model, pair, &analytic, tolerance)
}
