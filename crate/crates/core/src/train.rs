//! Mini-batch SGD training with validation-loss early stopping, evaluation
//! over a split, and the experiment report produced after a run.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{batches, Example};
use crate::error::{Error, Result};
use crate::metrics::{weighted_metrics, ConfusionMatrix, MetricsReport};
use crate::model::{
    example_loss_parts, forward_parts, regularizer_from_store, Model, ModelConfig,
};
use crate::optim::sgd_step;
use crate::tape::{ParamStore, Tape};
use crate::text::{tokenize_with_clauses, TokenizedText, Vocabulary};

/// Everything a training run needs beyond the data itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many consecutive epochs without a strictly lower
    /// validation loss.
    pub patience: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            learning_rate: 0.15,
            batch_size: 8,
            max_epochs: 30,
            patience: 3,
            clip_norm: Some(5.0),
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max epochs must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::Config(format!(
                    "clip norm must be positive when set, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// What the epoch loop decided.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochOutcome {
    /// Number of epochs actually executed (1-based count).
    pub epochs_run: usize,
    /// Epoch (1-based) whose parameters were restored.
    pub best_epoch: usize,
    pub best_loss: f64,
}

/// Drives `epoch_fn` (which trains one epoch and returns the validation
/// loss) until `max_epochs` or until `patience` consecutive epochs fail to
/// strictly improve on the best loss, then restores the best epoch's
/// parameters.
pub fn run_epochs(
    store: &mut ParamStore,
    patience: usize,
    max_epochs: usize,
    mut epoch_fn: impl FnMut(usize, &mut ParamStore) -> Result<f64>,
) -> Result<EpochOutcome> {
    if patience == 0 || max_epochs == 0 {
        return Err(Error::Config(
            "patience and max epochs must both be at least 1".into(),
        ));
    }
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snapshot = store.snapshot();
    let mut since_best = 0usize;
    let mut epochs_run = 0usize;
    for epoch in 1..=max_epochs {
        let loss = epoch_fn(epoch, store)?;
        epochs_run = epoch;
        if !loss.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite validation loss {loss} at epoch {epoch}"
            )));
        }
        if loss < best_loss {
            best_loss = loss;
            best_epoch = epoch;
            best_snapshot = store.snapshot();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= patience {
                break;
            }
        }
    }
    store.restore(&best_snapshot);
    Ok(EpochOutcome {
        epochs_run,
        best_epoch,
        best_loss,
    })
}

/// What a full training run reports back.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Monotonic wall time of the epoch loop, excluding tokenization.
    pub train_seconds: f64,
}

fn tokenize_split(
    examples: &[Example],
    vocab: &Vocabulary,
    max_len: usize,
    num_labels: usize,
) -> Result<Vec<(TokenizedText, usize)>> {
    examples
        .iter()
        .map(|ex| {
            if ex.label >= num_labels {
                return Err(Error::Data(format!(
                    "label {} out of range for {} classes",
                    ex.label, num_labels
                )));
            }
            Ok((tokenize_with_clauses(&ex.text, vocab, max_len)?, ex.label))
        })
        .collect()
}

/// The validation objective: mean per-example cross-entropy plus the
/// regularization penalty, both computed from current parameter values.
fn validation_loss(model_parts: &PartsRef<'_>, store: &ParamStore, val: &[(TokenizedText, usize)]) -> Result<f64> {
    let mut ce_sum = 0.0;
    for (text, label) in val {
        let mut tape = Tape::new();
        let node = example_loss_parts(
            &mut tape,
            store,
            model_parts.config,
            model_parts.encoder,
            model_parts.word_cells,
            model_parts.sent_cells,
            model_parts.head,
            text,
            *label,
        )?;
        ce_sum += tape.value(node)[0];
    }
    let mut loss = ce_sum / val.len() as f64;
    if model_parts.config.phi > 0.0 {
        let mut sq = 0.0;
        for (_, p) in store.iter() {
            if p.trainable && p.tensor.rank() == 2 {
                sq += p.tensor.data().iter().map(|v| v * v).sum::<f64>();
            }
        }
        loss += model_parts.config.phi * sq;
    }
    Ok(loss)
}

/// Borrowed model pieces, so the parameter store can be held mutably by the
/// epoch loop while the structure handles stay shared.
struct PartsRef<'a> {
    config: &'a ModelConfig,
    encoder: &'a crate::encoder::EncoderParams,
    word_cells: &'a [(crate::lstm::Direction, crate::lstm::LstmCellParams)],
    sent_cells: &'a [(crate::lstm::Direction, crate::lstm::LstmCellParams)],
    head: &'a crate::head::HeadParams,
}

/// Trains `model` in place and returns the run summary. Each epoch shuffles
/// the training set (seeded by `seed + epoch`), accumulates mean-scaled
/// per-example gradients per batch plus the regularizer, and steps with
/// optional global-norm clipping. Early stopping follows the validation
/// loss; the best epoch's parameters are restored before returning.
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    val_set: &[Example],
    vocab: &Vocabulary,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    tc.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(
            "training and validation splits must both be non-empty".into(),
        ));
    }
    let train_items = tokenize_split(train_set, vocab, tc.model.max_len, tc.model.num_labels)?;
    let val_items = tokenize_split(val_set, vocab, tc.model.max_len, tc.model.num_labels)?;

    let config = model.config.clone();
    let encoder = model.encoder.clone();
    let word_cells = model.word_cells.clone();
    let sent_cells = model.sent_cells.clone();
    let head = model.head.clone();
    let parts = PartsRef {
        config: &config,
        encoder: &encoder,
        word_cells: &word_cells,
        sent_cells: &sent_cells,
        head: &head,
    };

    let started = Instant::now();
    let outcome = run_epochs(
        &mut model.store,
        tc.patience,
        tc.max_epochs,
        |epoch, store| {
            let batch_ids = batches(
                &train_items,
                tc.batch_size,
                Some(tc.seed.wrapping_add(epoch as u64)),
            )?;
            for (batch_index, batch) in batch_ids.iter().enumerate() {
                let inv = 1.0 / batch.len() as f64;
                let mut batch_ce = 0.0;
                for &idx in batch {
                    let (text, label) = &train_items[idx];
                    let mut tape = Tape::new();
                    let ce = example_loss_parts(
                        &mut tape,
                        store,
                        parts.config,
                        parts.encoder,
                        parts.word_cells,
                        parts.sent_cells,
                        parts.head,
                        text,
                        *label,
                    )?;
                    let scaled = tape.scale(ce, inv);
                    batch_ce += tape.value(scaled)[0];
                    tape.backward(store, scaled)?;
                }
                let mut batch_loss = batch_ce;
                let mut reg_tape = Tape::new();
                if let Some(reg) = regularizer_from_store(&mut reg_tape, store, config.phi)? {
                    batch_loss += reg_tape.value(reg)[0];
                    reg_tape.backward(store, reg)?;
                }
                if !batch_loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: batch_index,
                    });
                }
                sgd_step(store, tc.learning_rate, tc.clip_norm)?;
            }
            validation_loss(&parts, store, &val_items)
        },
    )?;
    let train_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        epochs_run: outcome.epochs_run,
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_loss,
        train_seconds,
    })
}

/// Runs the model over a split and aggregates support-weighted metrics.
pub fn evaluate(model: &Model, examples: &[Example], vocab: &Vocabulary) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let m = model.config.num_labels;
    let mut cm = ConfusionMatrix::new(m);
    for ex in examples {
        if ex.label >= m {
            return Err(Error::Data(format!(
                "label {} out of range for {} classes",
                ex.label, m
            )));
        }
        let text = tokenize_with_clauses(&ex.text, vocab, model.config.max_len)?;
        let mut tape = Tape::new();
        let probs = forward_parts(
            &mut tape,
            &model.store,
            &model.config,
            &model.encoder,
            &model.word_cells,
            &model.sent_cells,
            &model.head,
            &text,
        )?;
        let pred = crate::head::predict_label(tape.value(probs));
        cm.add(ex.label, pred)?;
    }
    weighted_metrics(&cm, 1.0)
}

/// One row of the experiment summary: quality, cost, and size of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub time_seconds: f64,
    pub total_params: u64,
    pub trainable_params: u64,
    pub epochs: usize,
    pub size_bytes: u64,
}

impl ExperimentReport {
    pub fn validate(&self) -> Result<()> {
        if self.trainable_params > self.total_params {
            return Err(Error::Contract(format!(
                "trainable parameter count {} exceeds total {}",
                self.trainable_params, self.total_params
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "time_seconds": self.time_seconds,
            "total_params": self.total_params,
            "trainable_params": self.trainable_params,
            "epochs": self.epochs,
            "size_bytes": self.size_bytes,
        })
    }

    /// Fixed-width text table with the standard eight columns.
    pub fn to_table_text(&self) -> String {
        let header = [
            "Precision",
            "Recall",
            "F1-score",
            "Time",
            "Total params",
            "Trainable Params",
            "Epoch",
            "Size",
        ];
        let row = [
            format!("{:.4}", self.precision),
            format!("{:.4}", self.recall),
            format!("{:.4}", self.f1),
            format!("{:.1}s", self.time_seconds),
            self.total_params.to_string(),
            self.trainable_params.to_string(),
            self.epochs.to_string(),
            format!("{}B", self.size_bytes),
        ];
        let widths: Vec<usize> = header
            .iter()
            .zip(&row)
            .map(|(h, r)| h.len().max(r.len()))
            .collect();
        let line = |cells: Vec<String>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        format!(
            "{}\n{}\n",
            line(header.iter().map(|s| s.to_string()).collect()),
            line(row.to_vec())
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lstm::{Direction, FusionMode};
    use crate::tensor::Tensor;
    use crate::text::build_vocab;

    fn small_model_config(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            num_layers: 1,
            hidden: 8,
            heads: 2,
            ffn: 16,
            max_positions: 24,
            num_segments: 2,
            include_segments: true,
            freeze_below: 1,
            word_hidden: 4,
            sent_hidden: 4,
            bidirectional: false,
            word_direction: Direction::Forward,
            sentence_direction: Direction::Backward,
            mode: FusionMode::TokenSequence,
            lambda: 0.5,
            num_labels: 2,
            phi: 1e-4,
            loss_mean_over_labels: true,
            max_len: 24,
        }
    }

    fn toy_dataset() -> (Vec<Example>, Vec<Example>, Vocabulary) {
        let class0 = ["alpha beta", "alpha gamma", "beta alpha", "alpha beta gamma"];
        let class1 = ["delta epsilon", "delta zeta", "epsilon delta", "delta epsilon zeta"];
        let mut train = Vec::new();
        for t in &class0 {
            train.push(Example { text: t.to_string(), label: 0 });
        }
        for t in &class1 {
            train.push(Example { text: t.to_string(), label: 1 });
        }
        let val = vec![
            Example { text: "alpha beta".into(), label: 0 },
            Example { text: "delta zeta".into(), label: 1 },
        ];
        let corpus: Vec<String> = train.iter().map(|e| e.text.clone()).collect();
        let vocab = build_vocab(&corpus, 40, 1).unwrap();
        (train, val, vocab)
    }

    #[test]
    fn patience_rule_on_injected_losses() {
        let mut store = ParamStore::new();
        let marker = store.add("marker", Tensor::vector(vec![0.0]), true).unwrap();
        let losses = [1.0, 0.9, 0.95, 0.96, 0.97];
        let outcome = run_epochs(&mut store, 3, 10, |epoch, store| {
            // Record the epoch in a parameter so restoration is observable.
            store.get_mut(marker).tensor.data_mut()[0] = epoch as f64;
            Ok(losses[epoch - 1])
        })
        .unwrap();
        assert_eq!(outcome.epochs_run, 5);
        assert_eq!(outcome.best_epoch, 2);
        assert_eq!(outcome.best_loss, 0.9);
        // Parameters rolled back to the epoch-2 snapshot.
        assert_eq!(store.get(marker).tensor.data(), &[2.0]);
    }

    #[test]
    fn max_epochs_one_runs_exactly_one_epoch() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::vector(vec![0.0]), true).unwrap();
        let mut calls = 0;
        let outcome = run_epochs(&mut store, 3, 1, |_, _| {
            calls += 1;
            Ok(0.5)
        })
        .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(outcome.epochs_run, 1);
        assert_eq!(outcome.best_epoch, 1);
    }

    #[test]
    fn improving_losses_run_to_the_horizon() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::vector(vec![0.0]), true).unwrap();
        let outcome = run_epochs(&mut store, 2, 6, |epoch, _| Ok(1.0 / epoch as f64)).unwrap();
        assert_eq!(outcome.epochs_run, 6);
        assert_eq!(outcome.best_epoch, 6);
    }

    #[test]
    fn training_runs_and_lowers_validation_loss() {
        let (train_set, val_set, vocab) = toy_dataset();
        let mut tc = TrainConfig::default();
        tc.model = small_model_config(vocab.len());
        tc.max_epochs = 20;
        tc.patience = 20;
        tc.batch_size = 4;
        tc.learning_rate = 1.0;
        tc.seed = 7;
        let mut model = Model::new(tc.model.clone(), 7).unwrap();

        // Validation loss of the untouched model, for comparison.
        let val_items = tokenize_split(&val_set, &vocab, tc.model.max_len, 2).unwrap();
        let parts = PartsRef {
            config: &model.config.clone(),
            encoder: &model.encoder.clone(),
            word_cells: &model.word_cells.clone(),
            sent_cells: &model.sent_cells.clone(),
            head: &model.head.clone(),
        };
        let before = validation_loss(&parts, &model.store, &val_items).unwrap();

        let outcome = train(&mut model, &train_set, &val_set, &vocab, &tc).unwrap();
        assert!(outcome.epochs_run >= 1);
        assert!(outcome.best_epoch >= 1);
        assert!(outcome.best_val_loss < before, "no improvement over {before}");
        assert!(outcome.train_seconds >= 0.0);

        let report = evaluate(&model, &train_set, &vocab).unwrap();
        assert!(report.accuracy >= 0.5);
    }

    #[test]
    fn frozen_parameters_stay_bit_identical_through_training() {
        let (train_set, val_set, vocab) = toy_dataset();
        let mut tc = TrainConfig::default();
        tc.model = small_model_config(vocab.len());
        tc.max_epochs = 2;
        tc.patience = 2;
        tc.batch_size = 4;
        let mut model = Model::new(tc.model.clone(), 11).unwrap();
        let before = model.store.digest_hex(|p| !p.trainable);
        train(&mut model, &train_set, &val_set, &vocab, &tc).unwrap();
        let after = model.store.digest_hex(|p| !p.trainable);
        assert_eq!(before, after);
        // And something trainable did move.
        let trainable_digest_before = Model::new(tc.model.clone(), 11)
            .unwrap()
            .store
            .digest_hex(|p| p.trainable);
        assert_ne!(trainable_digest_before, model.store.digest_hex(|p| p.trainable));
    }

    #[test]
    fn absurd_learning_rate_reports_divergence() {
        let (train_set, val_set, vocab) = toy_dataset();
        let mut tc = TrainConfig::default();
        tc.model = small_model_config(vocab.len());
        tc.max_epochs = 10;
        tc.patience = 10;
        tc.batch_size = 8;
        // Large enough that squared weights overflow to infinity after the
        // first step; softmax keeps mere "huge" rates finite forever.
        tc.learning_rate = 1e200;
        tc.clip_norm = None;
        let mut model = Model::new(tc.model.clone(), 13).unwrap();
        match train(&mut model, &train_set, &val_set, &vocab, &tc) {
            Err(Error::Diverged { .. }) | Err(Error::Evaluation(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn evaluate_is_deterministic_and_handles_constant_predictors() {
        let (train_set, _, vocab) = toy_dataset();
        let cfg = small_model_config(vocab.len());
        let mut model = Model::new(cfg, 3).unwrap();
        // Zero the head so every text gets the uniform distribution, which
        // predicts label 0 by the tie rule.
        let w = model.head.w;
        model.store.get_mut(w).tensor.data_mut().fill(0.0);
        let all_zero: Vec<Example> = train_set
            .iter()
            .filter(|e| e.label == 0)
            .cloned()
            .collect();
        let r1 = evaluate(&model, &all_zero, &vocab).unwrap();
        assert_eq!(r1.accuracy, 1.0);
        let r2 = evaluate(&model, &all_zero, &vocab).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn rejects_out_of_range_labels_and_empty_splits() {
        let (mut train_set, val_set, vocab) = toy_dataset();
        let tc = {
            let mut t = TrainConfig::default();
            t.model = small_model_config(vocab.len());
            t
        };
        let mut model = Model::new(tc.model.clone(), 5).unwrap();
        assert!(train(&mut model, &[], &val_set, &vocab, &tc).is_err());
        assert!(train(&mut model, &train_set, &[], &vocab, &tc).is_err());
        train_set[0].label = 99;
        assert!(train(&mut model, &train_set, &val_set, &vocab, &tc).is_err());
        assert!(evaluate(&model, &train_set, &vocab).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        let mut c = TrainConfig::default();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.max_epochs = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.patience = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.clip_norm = Some(-1.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn report_json_uses_the_fixed_keys_and_table_lists_all_columns() {
        let report = ExperimentReport {
            precision: 0.91,
            recall: 0.9,
            f1: 0.905,
            time_seconds: 12.5,
            total_params: 1000,
            trainable_params: 400,
            epochs: 7,
            size_bytes: 8192,
        };
        report.validate().unwrap();
        let j = report.to_json();
        for key in [
            "precision",
            "recall",
            "f1",
            "time_seconds",
            "total_params",
            "trainable_params",
            "epochs",
            "size_bytes",
        ] {
            assert!(j.get(key).is_some(), "missing key {key}");
        }
        assert_eq!(j["total_params"], 1000);
        let table = report.to_table_text();
        for col in [
            "Precision",
            "Recall",
            "F1-score",
            "Time",
            "Total params",
            "Trainable Params",
            "Epoch",
            "Size",
        ] {
            assert!(table.contains(col), "missing column {col}");
        }
        let bad = ExperimentReport {
            trainable_params: 2000,
            ..report
        };
        assert!(bad.validate().is_err());
    }
}
