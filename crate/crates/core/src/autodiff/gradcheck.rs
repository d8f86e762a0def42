//! Central finite-difference checks of tape gradients.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero up
/// to round-off are compared on an absolute scale of `FD_REL_TOL * FLOOR`.
pub const FD_DENOM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    pub per_param: BTreeMap<String, f64>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }

    pub fn merge(&mut self, other: GradReport) {
        self.entries += other.entries;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.per_param.extend(other.per_param);
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_DENOM_FLOOR)
}

/// Compares `grads` against central differences of `loss` for every entry
/// of every parameter named in `grads`.
pub fn check_gradients(
    store: &ParamStore,
    grads: &BTreeMap<String, Tensor>,
    step: f64,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<GradReport> {
    let mut work = store.clone();
    let mut report = GradReport::default();
    for (name, g) in grads {
        let n = work.get(name)?.len();
        if g.len() != n {
            return Err(Error::Invariant(format!(
                "gradient size mismatch for '{name}'"
            )));
        }
        let mut worst_here = 0.0f64;
        for i in 0..n {
            let orig = work.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + step;
            let up = loss(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - step;
            let down = loss(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = g.data()[i];
            let e = rel_err(analytic, numeric);
            worst_here = worst_here.max(e);
            report.entries += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some(Mismatch {
                    param: name.clone(),
                    index: i,
                    analytic,
                    numeric,
                    rel_err: e,
                });
            }
        }
        report.per_param.insert(name.clone(), worst_here);
    }
    Ok(report)
}
