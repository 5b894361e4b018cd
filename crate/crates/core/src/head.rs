//! Max-over-time pooling and the softmax classification head with an
//! L2-regularized cross-entropy loss.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{glorot_uniform, NodeId, ParamId, ParamStore, Tape};
use crate::tensor::Tensor;

/// Parameters of the final classifier: a `labels x pooled` weight matrix, a
/// per-label bias, and the L2 coefficient applied to weight matrices in the
/// loss.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w: ParamId,
    pub b: ParamId,
    pub num_labels: usize,
    pub pooled_width: usize,
    pub phi: f64,
}

/// Registers the head parameters under `prefix` ("`prefix`.w", "`prefix`.b").
pub fn init_head(
    store: &mut ParamStore,
    prefix: &str,
    num_labels: usize,
    pooled_width: usize,
    phi: f64,
    rng: &mut Rng,
) -> Result<HeadParams> {
    if num_labels < 2 {
        return Err(Error::Config(format!(
            "classification needs at least 2 labels, got {num_labels}"
        )));
    }
    if pooled_width == 0 {
        return Err(Error::Config("pooled feature width must be positive".into()));
    }
    if !phi.is_finite() || phi < 0.0 {
        return Err(Error::Config(format!(
            "L2 coefficient must be finite and non-negative, got {phi}"
        )));
    }
    let w = store.add(
        &format!("{prefix}.w"),
        glorot_uniform(rng, num_labels, pooled_width),
        true,
    )?;
    let b = store.add(&format!("{prefix}.b"), Tensor::zeros(vec![num_labels]), true)?;
    Ok(HeadParams {
        w,
        b,
        num_labels,
        pooled_width,
        phi,
    })
}

/// Coordinatewise maximum over a non-empty sequence of equal-width vectors.
/// The backward pass routes each coordinate's gradient to the first time step
/// attaining the maximum.
pub fn max_pool_time(tape: &mut Tape, hidden: &[NodeId]) -> Result<NodeId> {
    if hidden.is_empty() {
        return Err(Error::Contract("max_pool_time over an empty sequence".into()));
    }
    let stacked = tape.stack_rows(hidden)?;
    tape.max_pool_rows(stacked)
}

/// Label distribution for a pooled feature vector: softmax of `W v + b`.
/// Entries are strictly positive and sum to 1 within 1e-12.
pub fn class_probs(
    tape: &mut Tape,
    store: &ParamStore,
    head: &HeadParams,
    pooled: NodeId,
) -> Result<NodeId> {
    let w = tape.param(store, head.w);
    let b = tape.param(store, head.b);
    let wv = tape.matvec(w, pooled)?;
    let logits = tape.add(wv, b)?;
    tape.softmax_rows(logits, None)
}

/// Argmax over a probability vector; ties go to the lowest label id.
pub fn predict_label(probs: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Index of the single 1.0 in a one-hot vector, or a contract error.
fn one_hot_index(target: &[f64]) -> Result<usize> {
    let mut hot: Option<usize> = None;
    for (i, &v) in target.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return Err(Error::Contract(
                    "target vector has more than one 1.0 entry".into(),
                ));
            }
            hot = Some(i);
        } else if v != 0.0 {
            return Err(Error::Contract(format!(
                "target vector entry {i} is {v}, expected 0.0 or 1.0"
            )));
        }
    }
    hot.ok_or_else(|| Error::Contract("target vector has no 1.0 entry".into()))
}

/// Cross-entropy of a one-hot target against `probs`, plus `phi` times the
/// squared L2 norm of the given weight matrices (biases are not penalized).
///
/// With `mean_over_labels` the cross-entropy term carries a `1 / num_labels`
/// prefactor; without it the term is the plain negative log-probability.
/// The log is clamped below at 1e-12. The regularizer is skipped entirely
/// when `phi` is zero.
pub fn loss(
    tape: &mut Tape,
    store: &ParamStore,
    probs: NodeId,
    target: &[f64],
    head: &HeadParams,
    regularized: &[ParamId],
    mean_over_labels: bool,
) -> Result<NodeId> {
    if tape.shape(probs) != [head.num_labels] {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: vec![head.num_labels],
            rhs: tape.shape(probs).to_vec(),
        });
    }
    if target.len() != head.num_labels {
        return Err(Error::Contract(format!(
            "target vector has {} entries for {} labels",
            target.len(),
            head.num_labels
        )));
    }
    let class = one_hot_index(target)?;
    let scale = if mean_over_labels {
        1.0 / head.num_labels as f64
    } else {
        1.0
    };
    let ce = tape.neg_log_prob(probs, class, scale)?;
    if head.phi == 0.0 || regularized.is_empty() {
        return Ok(ce);
    }
    let mut penalty: Option<NodeId> = None;
    for &id in regularized {
        let node = tape.param(store, id);
        let sq = tape.sum_squares(node);
        penalty = Some(match penalty {
            None => sq,
            Some(acc) => tape.add(acc, sq)?,
        });
    }
    let scaled = tape.scale(penalty.expect("non-empty list"), head.phi);
    tape.add(ce, scaled)
}
