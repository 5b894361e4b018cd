//! Finite-difference verification of the backward sweep.
//!
//! For each trainable scalar, the analytic gradient from one backward pass
//! is compared against a central difference of the loss. This is the
//! correctness instrument for every differentiable block in the repository.

use crate::error::{Error, Result};
use crate::tape::{NodeId, ParamStore, Tape};

/// Perturbation used by the central difference.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Relative-error budget for a passing check.
pub const DEFAULT_TOL: f64 = 1e-4;

/// Worst relative error observed for one parameter tensor.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub analytic_at_max: f64,
    pub numeric_at_max: f64,
}

/// Outcome of a full gradient check over a store.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Compare analytic gradients against central differences.
///
/// `f` builds the scalar loss on a fresh tape from the current parameter
/// values; it is invoked once for the analytic sweep and twice per trainable
/// scalar for the numeric estimate. Frozen parameters are skipped entirely.
/// A non-finite loss or gradient is reported as an evaluation error.
pub fn grad_check(
    store: &mut ParamStore,
    eps: f64,
    mut f: impl FnMut(&mut Tape, &ParamStore) -> Result<NodeId>,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }

    // Analytic pass.
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check: loss must be scalar, got shape {:?}",
            tape.shape(loss)
        )));
    }
    if !tape.value(loss)[0].is_finite() {
        return Err(Error::Evaluation(format!(
            "grad_check: loss is not finite ({})",
            tape.value(loss)[0]
        )));
    }
    tape.backward(store, loss)?;
    drop(tape);

    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| (p.name.clone(), p.grad.clone()))
        .collect();

    let trainable_ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();

    let mut report = GradCheckReport::default();
    for (slot, id) in trainable_ids.into_iter().enumerate() {
        let (name, grad) = &analytic[slot];
        let numel = store.get(id).tensor.numel();
        let mut entry = GradCheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            analytic_at_max: 0.0,
            numeric_at_max: 0.0,
        };
        for i in 0..numel {
            let original = store.get(id).tensor.data()[i];

            store.get_mut(id).tensor.data_mut()[i] = original + eps;
            let mut t_plus = Tape::new();
            let l_plus = f(&mut t_plus, store)?;
            let v_plus = t_plus.value(l_plus)[0];

            store.get_mut(id).tensor.data_mut()[i] = original - eps;
            let mut t_minus = Tape::new();
            let l_minus = f(&mut t_minus, store)?;
            let v_minus = t_minus.value(l_minus)[0];

            store.get_mut(id).tensor.data_mut()[i] = original;

            let numeric = (v_plus - v_minus) / (2.0 * eps);
            let a = grad[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Evaluation(format!(
                    "grad_check: non-finite derivative for {name}[{i}]: analytic {a}, numeric {numeric}"
                )));
            }
            let e = rel_err(a, numeric);
            if e > entry.max_rel_err {
                entry.max_rel_err = e;
                entry.analytic_at_max = a;
                entry.numeric_at_max = numeric;
            }
        }
        if entry.max_rel_err > report.max_rel_err {
            report.max_rel_err = entry.max_rel_err;
        }
        report.entries.push(entry);
    }
    store.zero_grads();
    Ok(report)
}
