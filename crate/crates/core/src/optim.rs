//! Plain stochastic gradient descent with optional global-norm clipping.

use crate::error::{Error, Result};
use crate::tape::ParamStore;

/// Apply one SGD update `w ← w − lr·g` to every trainable parameter.
///
/// When `clip` is set and the global L2 norm over all trainable gradients
/// exceeds it, every gradient is rescaled by `clip / norm` first. The step
/// consumes the gradients: they are zeroed afterwards, and calling this
/// without a preceding backward sweep is a contract error.
pub fn sgd_step(store: &mut ParamStore, lr: f64, clip: Option<f64>) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if !store.has_grads() {
        return Err(Error::Contract(
            "sgd_step called with no gradients accumulated".into(),
        ));
    }

    let mut scale = 1.0;
    if let Some(limit) = clip {
        if !(limit > 0.0) {
            return Err(Error::Config(format!(
                "gradient clip threshold must be positive, got {limit}"
            )));
        }
        let mut sq = 0.0;
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get(id);
            if p.trainable {
                sq += p.grad.iter().map(|g| g * g).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Contract(format!(
                "gradient norm is not finite ({norm})"
            )));
        }
        if norm > limit {
            scale = limit / norm;
        }
    }

    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get_mut(id);
        if p.trainable {
            let data = p.tensor.data_mut();
            for (w, g) in data.iter_mut().zip(&p.grad) {
                *w -= lr * scale * g;
            }
        }
        p.grad.fill(0.0);
    }
    store.clear_grad_mark();
    Ok(())
}
