//! Flat `key = value` run-configuration files.
//!
//! One assignment per line; blank lines and lines starting with `#` are
//! skipped. Every key is either recognized or rejected by name, so a typo
//! can never be silently ignored. Keys may appear in any order, at most
//! once each; absent keys keep their defaults.
//!
//! Special values: `clip_norm = none` disables clipping, `vocab_size = 0`
//! means "use the size of the vocabulary file supplied at run time", and an
//! absent `freeze_below` follows the number of encoder layers as L-1 (train
//! only the top layer).

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lstm::{Direction, FusionMode};
use crate::train::TrainConfig;

/// Every key the parser accepts, in file order.
pub const KNOWN_KEYS: &[&str] = &[
    // encoder shape
    "vocab_size",
    "num_layers",
    "hidden",
    "heads",
    "ffn",
    "max_positions",
    "num_segments",
    "include_segments",
    "freeze_below",
    // clause fusion
    "lambda",
    "mode",
    "word_direction",
    "sentence_direction",
    // recurrent stack and head
    "word_hidden",
    "sent_hidden",
    "bidirectional",
    "num_labels",
    "phi",
    "loss_mean_over_labels",
    "max_len",
    // optimization
    "learning_rate",
    "batch_size",
    "max_epochs",
    "patience",
    "clip_norm",
    "seed",
];

fn bad_value(key: &str, value: &str, wanted: &str) -> Error {
    Error::Config(format!("key {key:?}: expected {wanted}, got {value:?}"))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| bad_value(key, value, "a non-negative integer"))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| bad_value(key, value, "a non-negative integer"))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| bad_value(key, value, "a number"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad_value(key, value, "true or false")),
    }
}

fn parse_direction(key: &str, value: &str) -> Result<Direction> {
    match value {
        "forward" => Ok(Direction::Forward),
        "backward" => Ok(Direction::Backward),
        _ => Err(bad_value(key, value, "forward or backward")),
    }
}

fn parse_mode(key: &str, value: &str) -> Result<FusionMode> {
    match value {
        "token-sequence" => Ok(FusionMode::TokenSequence),
        "cls-ladder" => Ok(FusionMode::ClsLadder),
        _ => Err(bad_value(key, value, "token-sequence or cls-ladder")),
    }
}

/// Parses file text into a full training configuration and validates it.
pub fn parse_run_config(text: &str) -> Result<TrainConfig> {
    let mut tc = TrainConfig::default();
    let mut seen: HashSet<String> = HashSet::new();
    let mut freeze_set = false;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key = value, got {line:?}",
                lineno + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("duplicate key {key:?}")));
        }
        let m = &mut tc.model;
        match key {
            "vocab_size" => m.vocab_size = parse_usize(key, value)?,
            "num_layers" => m.num_layers = parse_usize(key, value)?,
            "hidden" => m.hidden = parse_usize(key, value)?,
            "heads" => m.heads = parse_usize(key, value)?,
            "ffn" => m.ffn = parse_usize(key, value)?,
            "max_positions" => m.max_positions = parse_usize(key, value)?,
            "num_segments" => m.num_segments = parse_usize(key, value)?,
            "include_segments" => m.include_segments = parse_bool(key, value)?,
            "freeze_below" => {
                m.freeze_below = parse_usize(key, value)?;
                freeze_set = true;
            }
            "lambda" => m.lambda = parse_f64(key, value)?,
            "mode" => m.mode = parse_mode(key, value)?,
            "word_direction" => m.word_direction = parse_direction(key, value)?,
            "sentence_direction" => m.sentence_direction = parse_direction(key, value)?,
            "word_hidden" => m.word_hidden = parse_usize(key, value)?,
            "sent_hidden" => m.sent_hidden = parse_usize(key, value)?,
            "bidirectional" => m.bidirectional = parse_bool(key, value)?,
            "num_labels" => m.num_labels = parse_usize(key, value)?,
            "phi" => m.phi = parse_f64(key, value)?,
            "loss_mean_over_labels" => m.loss_mean_over_labels = parse_bool(key, value)?,
            "max_len" => m.max_len = parse_usize(key, value)?,
            "learning_rate" => tc.learning_rate = parse_f64(key, value)?,
            "batch_size" => tc.batch_size = parse_usize(key, value)?,
            "max_epochs" => tc.max_epochs = parse_usize(key, value)?,
            "patience" => tc.patience = parse_usize(key, value)?,
            "clip_norm" => {
                tc.clip_norm = if value == "none" {
                    None
                } else {
                    Some(parse_f64(key, value)?)
                }
            }
            "seed" => tc.seed = parse_u64(key, value)?,
            _ => unreachable!("key list and match arms diverged"),
        }
    }

    if !freeze_set {
        tc.model.freeze_below = tc.model.num_layers.saturating_sub(1);
    }
    if tc.model.vocab_size == 0 {
        // Deferred vocabulary size: check everything else now.
        let mut probe = tc.clone();
        probe.model.vocab_size = 4;
        probe.validate()?;
    } else {
        tc.validate()?;
    }
    Ok(tc)
}

/// Reads and parses a run-configuration file.
pub fn load_run_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_run_config(&text)
}

/// Renders a configuration as file text that parses back to the same value.
pub fn render_run_config(tc: &TrainConfig) -> String {
    let m = &tc.model;
    let dir = |d: Direction| match d {
        Direction::Forward => "forward",
        Direction::Backward => "backward",
    };
    let mode = match m.mode {
        FusionMode::TokenSequence => "token-sequence",
        FusionMode::ClsLadder => "cls-ladder",
    };
    let clip = match tc.clip_norm {
        Some(v) => v.to_string(),
        None => "none".to_string(),
    };
    format!(
        "# encoder shape\n\
         vocab_size = {}\n\
         num_layers = {}\n\
         hidden = {}\n\
         heads = {}\n\
         ffn = {}\n\
         max_positions = {}\n\
         num_segments = {}\n\
         include_segments = {}\n\
         freeze_below = {}\n\
         \n\
         # clause fusion\n\
         lambda = {}\n\
         mode = {}\n\
         word_direction = {}\n\
         sentence_direction = {}\n\
         \n\
         # recurrent stack and head\n\
         word_hidden = {}\n\
         sent_hidden = {}\n\
         bidirectional = {}\n\
         num_labels = {}\n\
         phi = {}\n\
         loss_mean_over_labels = {}\n\
         max_len = {}\n\
         \n\
         # optimization\n\
         learning_rate = {}\n\
         batch_size = {}\n\
         max_epochs = {}\n\
         patience = {}\n\
         clip_norm = {}\n\
         seed = {}\n",
        m.vocab_size,
        m.num_layers,
        m.hidden,
        m.heads,
        m.ffn,
        m.max_positions,
        m.num_segments,
        m.include_segments,
        m.freeze_below,
        m.lambda,
        mode,
        dir(m.word_direction),
        dir(m.sentence_direction),
        m.word_hidden,
        m.sent_hidden,
        m.bidirectional,
        m.num_labels,
        m.phi,
        m.loss_mean_over_labels,
        m.max_len,
        tc.learning_rate,
        tc.batch_size,
        tc.max_epochs,
        tc.patience,
        clip,
        tc.seed,
    )
}
