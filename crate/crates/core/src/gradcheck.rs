//! Central finite-difference verification of autodiff gradients.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{ParamSet, ParamVars};

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Worst relative error over the entries of each parameter.
    pub per_parameter: BTreeMap<String, f64>,
}

/// Absolute difference below this is not scaled up: central differences
/// carry roughly `1e-16 / step` of rounding noise on exactly-zero gradients.
pub const ZERO_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, ZERO_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ZERO_FLOOR)
}

/// Compares `backward` against central differences with the given step for
/// every entry of every parameter.
///
/// `loss_fn` builds a scalar loss from the registered parameters; it is
/// called once for the analytic pass and twice per perturbed entry.
pub fn grad_check<F>(loss_fn: F, params: &ParamSet, step: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::validation(format!("finite-difference step {step} must be > 0")));
    }
    let mut g = Graph::new();
    let vars = ParamVars::trainable(&mut g, params, "");
    let loss = loss_fn(&mut g, &vars)?;
    let analytic = g.backward(loss)?;

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let vars = ParamVars::frozen(&mut g, p);
        let loss = loss_fn(&mut g, &vars)?;
        g.value(loss).item()
    };

    let mut per_parameter = BTreeMap::new();
    let mut perturbed = params.clone();
    for (name, tensor) in params.iter() {
        let mut worst: f64 = 0.0;
        for i in 0..tensor.numel() {
            let orig = tensor.data()[i];
            perturbed.get_mut(name).expect("cloned").data_mut()[i] = orig + step;
            let plus = eval(&perturbed)?;
            perturbed.get_mut(name).expect("cloned").data_mut()[i] = orig - step;
            let minus = eval(&perturbed)?;
            perturbed.get_mut(name).expect("cloned").data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(name).map_or(0.0, |t| t.data()[i]);
            worst = worst.max(relative_error(a, numeric));
        }
        per_parameter.insert(name.clone(), worst);
    }
    let max_rel_error = per_parameter.values().copied().fold(0.0, f64::max);
    Ok(GradReport {
        max_rel_error,
        per_parameter,
    })
}
