//! Dataset plumbing: CSV ingestion, label encoding, stratified splitting
//! and subsampling, batch iteration, and split manifests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// One labelled text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub text: String,
    pub label: usize,
}

/// Split fractions and shuffle seed. Fractions must sum to 1.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            train,
            val,
            test,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The 64/16/20 split used throughout.
    pub fn standard(seed: u64) -> Self {
        Self {
            train: 0.64,
            val: 0.16,
            test: 0.20,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Data(format!(
                    "split fraction {name} must lie in [0, 1], got {f}"
                )));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Read a `text,category` CSV (header required, column order and case
/// insensitive, quoted fields supported). Label names are assigned dense
/// ids in first-appearance order. Rows whose text is empty are rejected,
/// all at once, with their line numbers.
pub fn load_csv(path: &Path) -> Result<(Vec<Example>, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Data(format!("cannot read {}: {e}", path.display())),
            _ => Error::Csv(e),
        })?;

    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
    };
    let text_col = find("text").ok_or_else(|| {
        Error::Data(format!(
            "{}: header must contain a \"text\" column, found {:?}",
            path.display(),
            headers.iter().collect::<Vec<_>>()
        ))
    })?;
    let cat_col = find("category").ok_or_else(|| {
        Error::Data(format!(
            "{}: header must contain a \"category\" column, found {:?}",
            path.display(),
            headers.iter().collect::<Vec<_>>()
        ))
    })?;

    let mut examples = Vec::new();
    let mut label_names: Vec<String> = Vec::new();
    let mut label_ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut empty_rows: Vec<u64> = Vec::new();

    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(idx as u64 + 2);
        let text = record.get(text_col).unwrap_or("").to_string();
        let category = record.get(cat_col).unwrap_or("").to_string();
        if text.trim().is_empty() {
            empty_rows.push(line);
            continue;
        }
        let label = match label_ids.get(&category) {
            Some(&id) => id,
            None => {
                let id = label_names.len();
                label_ids.insert(category.clone(), id);
                label_names.push(category);
                id
            }
        };
        examples.push(Example { text, label });
    }
    if !empty_rows.is_empty() {
        return Err(Error::Data(format!(
            "{}: empty text in rows (line numbers): {}",
            path.display(),
            empty_rows
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    Ok((examples, label_names))
}

/// Write examples back out in the `text,category` schema.
pub fn write_csv(path: &Path, examples: &[Example], label_names: &[String]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["text", "category"])?;
    for ex in examples {
        let name = label_names.get(ex.label).ok_or_else(|| {
            Error::Data(format!(
                "label id {} has no name (know {} labels)",
                ex.label,
                label_names.len()
            ))
        })?;
        writer.write_record([ex.text.as_str(), name.as_str()])?;
    }
    writer.flush()?;
    Ok(())
}

/// Indices of `examples` grouped by label, ascending label id, preserving
/// input order within a group.
fn indices_by_class(examples: &[Example]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        groups.entry(ex.label).or_default().push(i);
    }
    groups
}

/// Per-class sizes for a three-way split: nearest rounding for train and
/// val with train-first priority, remainder to test, shrunk (val first)
/// when rounding overshoots the class size.
fn class_allocation(n: usize, spec: &SplitSpec) -> (usize, usize, usize) {
    let mut train = (spec.train * n as f64).round() as usize;
    let mut val = (spec.val * n as f64).round() as usize;
    if train > n {
        train = n;
    }
    if train + val > n {
        val = n - train;
    }
    let test = n - train - val;
    (train, val, test)
}

/// Shuffle each class with the configured seed and deal the 64/16/20 (or
/// custom) allocation. Deterministic for a fixed seed; the three outputs
/// partition the input.
pub fn stratified_split(
    examples: &[Example],
    spec: &SplitSpec,
) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>)> {
    spec.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let mut rng = Rng::new(spec.seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (_, mut idxs) in indices_by_class(examples) {
        rng.shuffle(&mut idxs);
        let (n_train, n_val, _) = class_allocation(idxs.len(), spec);
        for (pos, &i) in idxs.iter().enumerate() {
            let ex = examples[i].clone();
            if pos < n_train {
                train.push(ex);
            } else if pos < n_train + n_val {
                val.push(ex);
            } else {
                test.push(ex);
            }
        }
    }
    Ok((train, val, test))
}

/// Draw `ceil(fraction * n_c)` examples per class without replacement.
pub fn stratified_subsample(
    examples: &[Example],
    fraction: f64,
    seed: u64,
) -> Result<Vec<Example>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Data(format!(
            "subsample fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for (_, mut idxs) in indices_by_class(examples) {
        rng.shuffle(&mut idxs);
        let keep = (fraction * idxs.len() as f64).ceil() as usize;
        for &i in idxs.iter().take(keep) {
            out.push(examples[i].clone());
        }
    }
    Ok(out)
}

/// Index batches over `items`: optional seeded shuffle, fixed batch size,
/// final partial batch included.
pub fn batches<T>(
    items: &[T],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Data("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    if let Some(seed) = shuffle_seed {
        Rng::new(seed).shuffle(&mut order);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Reproducibility record stored next to split CSVs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub counts: SplitCounts,
    /// Fraction used by a subsample applied before splitting, when any.
    pub subsample_fraction: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Write `train.csv`, `val.csv`, `test.csv`, and `split.json` into `dir`.
pub fn write_split_manifest(
    dir: &Path,
    splits: (&[Example], &[Example], &[Example]),
    label_names: &[String],
    spec: &SplitSpec,
    subsample_fraction: Option<f64>,
) -> Result<()> {
    let (train, val, test) = splits;
    std::fs::create_dir_all(dir)?;
    write_csv(&dir.join("train.csv"), train, label_names)?;
    write_csv(&dir.join("val.csv"), val, label_names)?;
    write_csv(&dir.join("test.csv"), test, label_names)?;
    let manifest = SplitManifest {
        seed: spec.seed,
        fractions: [spec.train, spec.val, spec.test],
        counts: SplitCounts {
            train: train.len(),
            val: val.len(),
            test: test.len(),
        },
        subsample_fraction,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("split.json"), json)?;
    Ok(())
}
