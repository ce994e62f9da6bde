//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values on fresh inference
//! tapes, so it is independent of the backward implementation it checks.

use super::params::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Gradients whose magnitudes both fall below this are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter, element, analytic, numeric)` at the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the tape gradient of `loss_fn` against central differences with
/// step `eps` for every element of every parameter (or of `only`, if given).
/// `max_per_param` caps how many evenly spaced elements are probed per tensor.
pub fn check_gradients<F>(
    store: &ParameterStore,
    eps: f64,
    only: Option<&[&str]>,
    max_per_param: Option<usize>,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::inference(s);
        let loss = loss_fn(&mut tape)?;
        Ok(tape.scalar(loss))
    };

    let names: Vec<String> = match only {
        Some(list) => list.iter().map(|s| s.to_string()).collect(),
        None => store.names().cloned().collect(),
    };
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for name in names {
        let len = work.get(&name)?.len();
        let stride = match max_per_param {
            Some(m) if m > 0 && len > m => len.div_ceil(m),
            _ => 1,
        };
        let grad = analytic
            .get(&name)
            .map(|t| t.data.clone())
            .unwrap_or_else(|| vec![0.0; len]);
        for i in (0..len).step_by(stride) {
            let orig = work.get(&name)?.data[i];
            work.get_mut(&name)?.data[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(&name)?.data[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(&name)?.data[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(grad[i], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i, grad[i], numeric));
            }
        }
    }
    Ok(report)
}
