//! `dblp`: batch command-line front end for the short-text classifier.
//!
//! Machine-readable results go to standard output as JSON; progress logs and
//! the human-readable report table go to standard error. Exit codes: 0 on
//! success, 1 on a usage error (bad flags or subcommand), 2 on any data,
//! config, or model error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde_json::json;

use dblp_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use dblp_core::data::{
    load_csv, stratified_split, stratified_subsample, write_csv, write_split_manifest, Example,
    SplitSpec,
};
use dblp_core::model::{count_from_config, Model};
use dblp_core::runconfig::load_run_config;
use dblp_core::text::{build_vocab, tokenize_with_clauses, Vocabulary};
use dblp_core::train::{evaluate, train, ExperimentReport, TrainConfig};
use dblp_core::{Error, Result};

/// Default cap on vocabulary size when `train` builds one on the fly.
const DEFAULT_VOCAB_CAP: usize = 8192;

#[derive(Parser)]
#[command(
    name = "dblp",
    version,
    about = "Train and evaluate the distilled-encoder + hierarchical LSTM short-text classifier"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a subword vocabulary file from a text,category CSV corpus.
    BuildVocab {
        /// Corpus CSV (text,category with header).
        #[arg(long)]
        corpus: PathBuf,
        /// Output vocabulary file (one token per line).
        #[arg(long)]
        out: PathBuf,
        /// Maximum vocabulary size including the special tokens.
        #[arg(long, default_value_t = DEFAULT_VOCAB_CAP)]
        max_size: usize,
        /// Drop whole words rarer than this before deriving pieces.
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
    },
    /// Stratified split of a CSV into train.csv, val.csv, test.csv + split.json.
    Split {
        /// Input CSV (text,category with header).
        #[arg(long)]
        input: PathBuf,
        /// Directory that receives the three split CSVs and the manifest.
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated train,val,test fractions summing to 1.
        #[arg(long, default_value = "0.64,0.16,0.20")]
        fractions: String,
        #[arg(long, default_value_t = 13)]
        seed: u64,
    },
    /// Stratified subsample of a CSV, keeping every class non-empty.
    Subsample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of each class to keep (ceil per class).
        #[arg(long, default_value_t = 0.05)]
        fraction: f64,
        #[arg(long, default_value_t = 13)]
        seed: u64,
    },
    /// Train a model from a run-config file and a split directory.
    Train {
        /// Flat key=value run-configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Directory containing train.csv and val.csv.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path; the vocabulary lands next to it as
        /// <out>.vocab.
        #[arg(long)]
        out: PathBuf,
        /// Use this vocabulary file instead of building one from train.csv.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split CSV; metrics JSON on standard output.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV to evaluate (text,category with header).
        #[arg(long)]
        split: PathBuf,
        /// Vocabulary file (default: <checkpoint>.vocab).
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Classify one text; label and probability vector on standard output.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        /// Vocabulary file (default: <checkpoint>.vocab).
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Total/trainable parameter counts implied by a run-config file.
    ParamCount {
        #[arg(long)]
        config: PathBuf,
        /// Vocabulary file, required when the config defers vocab_size (0).
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Evaluate and print the experiment-table row (JSON on standard output,
    /// aligned table on standard error).
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Vocabulary file (default: <checkpoint>.vocab).
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are successful outcomes; anything else is a
            // usage error reported with the usage text on standard error.
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                ExitCode::SUCCESS
            } else {
                eprint!("{e}");
                ExitCode::from(1)
            };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::BuildVocab {
            corpus,
            out,
            max_size,
            min_freq,
        } => cmd_build_vocab(&corpus, &out, max_size, min_freq),
        Command::Split {
            input,
            out_dir,
            fractions,
            seed,
        } => cmd_split(&input, &out_dir, &fractions, seed),
        Command::Subsample {
            input,
            out,
            fraction,
            seed,
        } => cmd_subsample(&input, &out, fraction, seed),
        Command::Train {
            config,
            data,
            out,
            vocab,
        } => cmd_train(&config, &data, &out, vocab.as_deref()),
        Command::Evaluate {
            checkpoint,
            split,
            vocab,
        } => cmd_evaluate(&checkpoint, &split, vocab.as_deref()),
        Command::Predict {
            checkpoint,
            text,
            vocab,
        } => cmd_predict(&checkpoint, &text, vocab.as_deref()),
        Command::ParamCount { config, vocab } => cmd_param_count(&config, vocab.as_deref()),
        Command::Report {
            checkpoint,
            split,
            vocab,
        } => cmd_report(&checkpoint, &split, vocab.as_deref()),
    }
}

/// The vocabulary written/read next to a checkpoint: `<checkpoint>.vocab`.
fn default_vocab_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".vocab");
    PathBuf::from(name)
}

/// Re-key examples from one label-name table to another. Split CSVs assign
/// dense ids in first-appearance order, so files can disagree; names are
/// the shared identity.
fn remap_labels(
    examples: Vec<Example>,
    from_names: &[String],
    to_names: &[String],
) -> Result<Vec<Example>> {
    examples
        .into_iter()
        .map(|ex| {
            let name = &from_names[ex.label];
            let label = to_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Data(format!("unknown category {name:?} in split file")))?;
            Ok(Example {
                text: ex.text,
                label,
            })
        })
        .collect()
}

/// Loads a vocabulary and checks it is the one the checkpoint was trained
/// with (by content digest).
fn load_matching_vocab(path: &Path, meta: &CheckpointMeta) -> Result<Vocabulary> {
    let vocab = Vocabulary::read_file(path)?;
    let digest = vocab.sha256_hex();
    if digest != meta.vocab_sha256 {
        return Err(Error::Checkpoint(format!(
            "vocabulary {} (sha256 {digest}) is not the one this checkpoint was trained with",
            path.display()
        )));
    }
    Ok(vocab)
}

fn cmd_build_vocab(corpus: &Path, out: &Path, max_size: usize, min_freq: usize) -> Result<()> {
    let (examples, _) = load_csv(corpus)?;
    let texts: Vec<String> = examples.into_iter().map(|e| e.text).collect();
    let vocab = build_vocab(&texts, max_size, min_freq)?;
    vocab.write_file(out)?;
    eprintln!(
        "built vocabulary of {} tokens from {} texts",
        vocab.len(),
        texts.len()
    );
    println!(
        "{}",
        json!({
            "tokens": vocab.len(),
            "sha256": vocab.sha256_hex(),
            "path": out.display().to_string(),
        })
    );
    Ok(())
}

fn parse_fractions(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "--fractions wants three comma-separated numbers, got {s:?}"
        )));
    }
    let mut out = [0.0; 3];
    for (slot, p) in out.iter_mut().zip(&parts) {
        *slot = p
            .parse()
            .map_err(|_| Error::Config(format!("bad fraction {p:?} in {s:?}")))?;
    }
    Ok(out)
}

fn cmd_split(input: &Path, out_dir: &Path, fractions: &str, seed: u64) -> Result<()> {
    let [ft, fv, fe] = parse_fractions(fractions)?;
    let spec = SplitSpec::new(ft, fv, fe, seed)?;
    let (examples, label_names) = load_csv(input)?;
    let (train_set, val_set, test_set) = stratified_split(&examples, &spec)?;
    write_split_manifest(
        out_dir,
        (&train_set, &val_set, &test_set),
        &label_names,
        &spec,
        None,
    )?;
    eprintln!(
        "split {} rows into {}/{}/{} under {}",
        examples.len(),
        train_set.len(),
        val_set.len(),
        test_set.len(),
        out_dir.display()
    );
    println!(
        "{}",
        json!({
            "train": train_set.len(),
            "val": val_set.len(),
            "test": test_set.len(),
            "dir": out_dir.display().to_string(),
        })
    );
    Ok(())
}

fn cmd_subsample(input: &Path, out: &Path, fraction: f64, seed: u64) -> Result<()> {
    let (examples, label_names) = load_csv(input)?;
    let kept = stratified_subsample(&examples, fraction, seed)?;
    write_csv(out, &kept, &label_names)?;
    eprintln!(
        "kept {} of {} rows ({} classes)",
        kept.len(),
        examples.len(),
        label_names.len()
    );
    println!(
        "{}",
        json!({
            "kept": kept.len(),
            "of": examples.len(),
            "fraction": fraction,
            "path": out.display().to_string(),
        })
    );
    Ok(())
}

/// Resolves the training configuration: run-config file, then the DBLP_SEED
/// environment override, then the vocabulary-size substitution.
fn resolve_train_config(config: &Path, vocab_len: usize) -> Result<TrainConfig> {
    let mut tc = load_run_config(config)?;
    if let Ok(seed) = std::env::var("DBLP_SEED") {
        tc.seed = seed.parse().map_err(|_| {
            Error::Config(format!(
                "DBLP_SEED must be a non-negative integer, got {seed:?}"
            ))
        })?;
        eprintln!("seed overridden by DBLP_SEED: {}", tc.seed);
    }
    if tc.model.vocab_size == 0 {
        tc.model.vocab_size = vocab_len;
    } else if tc.model.vocab_size != vocab_len {
        return Err(Error::Config(format!(
            "config says vocab_size {} but the vocabulary has {} tokens \
             (set vocab_size = 0 to follow the vocabulary file)",
            tc.model.vocab_size, vocab_len
        )));
    }
    tc.validate()?;
    Ok(tc)
}

fn cmd_train(config: &Path, data: &Path, out: &Path, vocab_flag: Option<&Path>) -> Result<()> {
    let train_csv = data.join("train.csv");
    let val_csv = data.join("val.csv");
    let (train_set, label_names) = load_csv(&train_csv)?;
    let (val_raw, val_names) = load_csv(&val_csv)?;
    let val_set = remap_labels(val_raw, &val_names, &label_names)?;

    let vocab = match vocab_flag {
        Some(path) => Vocabulary::read_file(path)?,
        None => {
            let texts: Vec<String> = train_set.iter().map(|e| e.text.clone()).collect();
            let v = build_vocab(&texts, DEFAULT_VOCAB_CAP, 1)?;
            eprintln!("built vocabulary of {} tokens from train.csv", v.len());
            v
        }
    };

    let tc = resolve_train_config(config, vocab.len())?;
    if tc.model.num_labels != label_names.len() {
        return Err(Error::Config(format!(
            "config says num_labels {} but train.csv has {} categories",
            tc.model.num_labels,
            label_names.len()
        )));
    }

    eprintln!(
        "training on {} examples, validating on {} (seed {})",
        train_set.len(),
        val_set.len(),
        tc.seed
    );
    let mut model = Model::new(tc.model.clone(), tc.seed)?;
    let outcome = train(&mut model, &train_set, &val_set, &vocab, &tc)?;
    let (total_params, trainable_params) = model.count_params();

    let vocab_path = default_vocab_path(out);
    vocab.write_file(&vocab_path)?;
    let meta = CheckpointMeta {
        config: model.config.clone(),
        label_names,
        vocab_sha256: vocab.sha256_hex(),
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
        train_seconds: outcome.train_seconds,
    };
    let size_bytes = save_checkpoint(&model, &meta, out)?;
    eprintln!(
        "stopped after {} epochs (best {}), wrote {} ({} bytes) and {}",
        outcome.epochs_run,
        outcome.best_epoch,
        out.display(),
        size_bytes,
        vocab_path.display()
    );
    println!(
        "{}",
        json!({
            "checkpoint": out.display().to_string(),
            "vocab": vocab_path.display().to_string(),
            "size_bytes": size_bytes,
            "epochs_run": outcome.epochs_run,
            "best_epoch": outcome.best_epoch,
            "best_val_loss": outcome.best_val_loss,
            "train_seconds": outcome.train_seconds,
            "total_params": total_params,
            "trainable_params": trainable_params,
        })
    );
    Ok(())
}

/// Shared loader for the evaluation-style commands: checkpoint, matching
/// vocabulary, and the split re-keyed to the checkpoint's label table.
fn load_eval_inputs(
    checkpoint: &Path,
    split: &Path,
    vocab_flag: Option<&Path>,
) -> Result<(Model, CheckpointMeta, Vocabulary, Vec<Example>)> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let vocab_path = vocab_flag
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_vocab_path(checkpoint));
    let vocab = load_matching_vocab(&vocab_path, &meta)?;
    let (raw, names) = load_csv(split)?;
    let examples = remap_labels(raw, &names, &meta.label_names)?;
    Ok((model, meta, vocab, examples))
}

fn cmd_evaluate(checkpoint: &Path, split: &Path, vocab_flag: Option<&Path>) -> Result<()> {
    let (model, _, vocab, examples) = load_eval_inputs(checkpoint, split, vocab_flag)?;
    eprintln!("evaluating {} examples", examples.len());
    let report = evaluate(&model, &examples, &vocab)?;
    println!("{}", report.to_json());
    Ok(())
}

fn cmd_predict(checkpoint: &Path, text: &str, vocab_flag: Option<&Path>) -> Result<()> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let vocab_path = vocab_flag
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_vocab_path(checkpoint));
    let vocab = load_matching_vocab(&vocab_path, &meta)?;
    let tokenized = tokenize_with_clauses(text, &vocab, model.config.max_len)?;
    let (label_id, probabilities) = model.predict(&tokenized)?;
    println!(
        "{}",
        json!({
            "label": meta.label_names[label_id],
            "label_id": label_id,
            "probabilities": probabilities,
        })
    );
    Ok(())
}

fn cmd_param_count(config: &Path, vocab_flag: Option<&Path>) -> Result<()> {
    let mut tc = load_run_config(config)?;
    if tc.model.vocab_size == 0 {
        let vocab_path = vocab_flag.ok_or_else(|| {
            Error::Config(
                "this config defers vocab_size to a vocabulary file; pass --vocab".into(),
            )
        })?;
        tc.model.vocab_size = Vocabulary::read_file(vocab_path)?.len();
    }
    let (total, trainable) = count_from_config(&tc.model)?;
    println!("{}", json!({ "total": total, "trainable": trainable }));
    Ok(())
}

fn cmd_report(checkpoint: &Path, split: &Path, vocab_flag: Option<&Path>) -> Result<()> {
    let (model, meta, vocab, examples) = load_eval_inputs(checkpoint, split, vocab_flag)?;
    let metrics = evaluate(&model, &examples, &vocab)?;
    let (total_params, trainable_params) = model.count_params();
    let size_bytes = std::fs::metadata(checkpoint)?.len();
    let report = ExperimentReport {
        precision: metrics.precision_weighted,
        recall: metrics.recall_weighted,
        f1: metrics.f_weighted,
        time_seconds: meta.train_seconds,
        total_params,
        trainable_params,
        epochs: meta.epochs_run,
        size_bytes,
    };
    report.validate()?;
    eprintln!("{}", report.to_table_text());
    println!("{}", report.to_json());
    Ok(())
}
