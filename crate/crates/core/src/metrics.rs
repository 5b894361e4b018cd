//! Weighted multiclass evaluation: confusion matrix, per-class precision
//! and recall, F-beta, and support-weighted aggregates.
//!
//! Zero-denominator convention: precision, recall, and F all evaluate to 0
//! when their denominator vanishes (a class never predicted, never seen, or
//! with P = R = 0).

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// Count matrix with entry `(t, p)` = number of samples of true class `t`
/// predicted as class `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    m: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            counts: vec![0; m * m],
        }
    }

    /// Tally parallel label sequences into an `m x m` matrix.
    pub fn from_labels(y_true: &[usize], y_pred: &[usize], m: usize) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::Evaluation(format!(
                "label sequences differ in length: {} vs {}",
                y_true.len(),
                y_pred.len()
            )));
        }
        let mut cm = Self::new(m);
        for (&t, &p) in y_true.iter().zip(y_pred) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, t: usize, p: usize) -> Result<()> {
        if t >= self.m || p >= self.m {
            return Err(Error::Evaluation(format!(
                "label out of range: true {t}, predicted {p}, classes {}",
                self.m
            )));
        }
        self.counts[t * self.m + p] += 1;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.m
    }

    pub fn count(&self, t: usize, p: usize) -> u64 {
        self.counts[t * self.m + p]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Samples whose true class is `l` (row sum).
    pub fn support(&self, l: usize) -> u64 {
        (0..self.m).map(|p| self.count(l, p)).sum()
    }

    /// Samples predicted as class `l` (column sum).
    pub fn predicted(&self, l: usize) -> u64 {
        (0..self.m).map(|t| self.count(t, l)).sum()
    }

    pub fn true_positives(&self, l: usize) -> u64 {
        self.count(l, l)
    }
}

/// Per-class `(precision, recall)` with the zero convention applied.
pub fn per_class_pr(cm: &ConfusionMatrix) -> Vec<(f64, f64)> {
    (0..cm.n_classes())
        .map(|l| {
            let tp = cm.true_positives(l) as f64;
            let predicted = cm.predicted(l) as f64;
            let support = cm.support(l) as f64;
            let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let r = if support > 0.0 { tp / support } else { 0.0 };
            (p, r)
        })
        .collect()
}

/// `F_beta = (1 + beta^2) * P * R / (beta^2 * P + R)`, 0 when the
/// denominator is 0. Callers must pass `beta > 0`.
pub fn f_beta(p: f64, r: f64, beta: f64) -> f64 {
    debug_assert!(beta > 0.0);
    let b2 = beta * beta;
    let denom = b2 * p + r;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * r / denom
    }
}

/// Metrics for one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub support: u64,
}

/// Full evaluation summary: per-class rows plus support-weighted aggregates
/// and accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub precision_weighted: f64,
    pub recall_weighted: f64,
    pub f_weighted: f64,
    pub accuracy: f64,
}

/// Aggregate a confusion matrix into a [`MetricsReport`].
///
/// Weighted X = Σ_l support_l · X_l / Σ_l support_l for X in {P, R, F};
/// accuracy = trace / total. An empty matrix is an error.
pub fn weighted_metrics(cm: &ConfusionMatrix, beta: f64) -> Result<MetricsReport> {
    if !(beta > 0.0) {
        return Err(Error::Evaluation(format!(
            "beta must be positive, got {beta}"
        )));
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::Evaluation(
            "cannot compute metrics over zero samples".into(),
        ));
    }
    let pr = per_class_pr(cm);
    let mut per_class = Vec::with_capacity(cm.n_classes());
    let mut wp = 0.0;
    let mut wr = 0.0;
    let mut wf = 0.0;
    let mut correct = 0u64;
    for (l, &(p, r)) in pr.iter().enumerate() {
        let support = cm.support(l);
        let f = f_beta(p, r, beta);
        per_class.push(ClassMetrics {
            precision: p,
            recall: r,
            f,
            support,
        });
        let w = support as f64;
        wp += w * p;
        wr += w * r;
        wf += w * f;
        correct += cm.true_positives(l);
    }
    let n = total as f64;
    Ok(MetricsReport {
        per_class,
        precision_weighted: wp / n,
        recall_weighted: wr / n,
        f_weighted: wf / n,
        accuracy: correct as f64 / n,
    })
}

impl MetricsReport {
    /// Machine-readable form with fixed key names.
    pub fn to_json(&self) -> Value {
        let mut per_class = Map::new();
        for (l, c) in self.per_class.iter().enumerate() {
            per_class.insert(
                l.to_string(),
                json!({ "p": c.precision, "r": c.recall, "f": c.f }),
            );
        }
        json!({
            "precision_weighted": self.precision_weighted,
            "recall_weighted": self.recall_weighted,
            "f1_weighted": self.f_weighted,
            "accuracy": self.accuracy,
            "per_class": Value::Object(per_class),
        })
    }

    /// Flat `key=value` lines mirroring the JSON keys.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("precision_weighted={}\n", self.precision_weighted));
        out.push_str(&format!("recall_weighted={}\n", self.recall_weighted));
        out.push_str(&format!("f1_weighted={}\n", self.f_weighted));
        out.push_str(&format!("accuracy={}\n", self.accuracy));
        for (l, c) in self.per_class.iter().enumerate() {
            out.push_str(&format!("per_class.{l}.p={}\n", c.precision));
            out.push_str(&format!("per_class.{l}.r={}\n", c.recall));
            out.push_str(&format!("per_class.{l}.f={}\n", c.f));
        }
        out
    }
}
