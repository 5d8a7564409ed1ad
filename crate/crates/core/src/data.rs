//! Labeled corpora, encoding into fixed-length id sequences, and batching.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::{encode_example, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(Format::Csv),
            "jsonl" | "json" => Some(Format::Jsonl),
            _ => None,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(Error::Data(format!("unknown dataset format {other:?}"))),
        }
    }
}

/// Default `max_len` for short-headline, long-paragraph and long-document corpora.
pub const SHORT_TEXT_MAX_LEN: usize = 64;
pub const PARAGRAPH_MAX_LEN: usize = 256;
pub const DOCUMENT_MAX_LEN: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub text: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub examples: Vec<Example>,
    /// Sorted; `label` indexes into this list.
    pub label_names: Vec<String>,
    pub split: Split,
}

impl LabeledDataset {
    /// Builds a dataset from raw `(text, label)` pairs; label ids follow the
    /// lexicographic order of the distinct label strings.
    pub fn from_pairs(pairs: Vec<(String, String)>, split: Split) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        let label_names: Vec<String> = pairs
            .iter()
            .map(|(_, l)| l.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: HashMap<&str, usize> = label_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let examples = pairs
            .iter()
            .map(|(text, l)| Example {
                text: text.clone(),
                label: index[l.as_str()],
            })
            .collect();
        Ok(Self {
            examples,
            label_names,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Re-expresses labels against `names`, e.g. a training split's label list.
    pub fn relabel(&self, names: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut examples = Vec::with_capacity(self.len());
        for ex in &self.examples {
            let name = &self.label_names[ex.label];
            let label = *index
                .get(name.as_str())
                .ok_or_else(|| Error::Data(format!("{} split has unseen label {name:?}", self.split)))?;
            examples.push(Example {
                text: ex.text.clone(),
                label,
            });
        }
        Ok(Self {
            examples,
            label_names: names.to_vec(),
            split: self.split,
        })
    }
}

fn json_label(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn read_jsonl(path: &Path, text_field: &str, label_field: &str) -> Result<Vec<(String, String)>> {
    let content = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let obj: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}: line {lineno}: malformed JSON: {e}", path.display())))?;
        let text = obj
            .get(text_field)
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Data(format!("{}: line {lineno}: missing field {text_field:?}", path.display())))?;
        let label = obj
            .get(label_field)
            .and_then(json_label)
            .ok_or_else(|| Error::Data(format!("{}: line {lineno}: missing field {label_field:?}", path.display())))?;
        pairs.push((text.to_string(), label));
    }
    Ok(pairs)
}

fn read_csv(path: &Path, text_field: &str, label_field: &str) -> Result<Vec<(String, String)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: line 1: {e}", path.display())))?
        .clone();
    let column = |field: &str| {
        headers
            .iter()
            .position(|h| h == field)
            .ok_or_else(|| Error::Data(format!("{}: line 1: missing field {field:?} in header", path.display())))
    };
    let (text_col, label_col) = (column(text_field)?, column(label_field)?);
    let mut pairs = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Data(format!("{}: line {line}: malformed row: {e}", path.display()))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let label = record
            .get(label_col)
            .filter(|l| !l.is_empty())
            .ok_or_else(|| Error::Data(format!("{}: line {line}: missing field {label_field:?}", path.display())))?;
        let text = record
            .get(text_col)
            .ok_or_else(|| Error::Data(format!("{}: line {line}: missing field {text_field:?}", path.display())))?;
        pairs.push((text.to_string(), label.to_string()));
    }
    Ok(pairs)
}

pub fn load_dataset(
    path: impl AsRef<Path>,
    format: Format,
    text_field: &str,
    label_field: &str,
    split: Split,
) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let pairs = match format {
        Format::Csv => read_csv(path, text_field, label_field)?,
        Format::Jsonl => read_jsonl(path, text_field, label_field)?,
    };
    if pairs.is_empty() {
        return Err(Error::Data(format!("{}: no examples", path.display())));
    }
    LabeledDataset::from_pairs(pairs, split)
}

/// Loads a file, picking the format from its extension.
pub fn load_dataset_auto(path: impl AsRef<Path>, text_field: &str, label_field: &str, split: Split) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let format = Format::from_path(path)
        .ok_or_else(|| Error::Data(format!("{}: cannot infer format from extension", path.display())))?;
    load_dataset(path, format, text_field, label_field, split)
}

/// Train/validation/test splits sharing the training split's label list.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
}

fn find_split_file(dir: &Path, stems: &[&str]) -> Result<PathBuf> {
    for stem in stems {
        for ext in ["csv", "jsonl"] {
            let p = dir.join(format!("{stem}.{ext}"));
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(Error::Data(format!(
        "{}: no {}.csv or {}.jsonl",
        dir.display(),
        stems[0],
        stems[0]
    )))
}

/// Reads `train`, `validation` (or `val`/`dev`) and `test` files from `dir`.
pub fn load_splits(dir: impl AsRef<Path>, text_field: &str, label_field: &str) -> Result<Splits> {
    let dir = dir.as_ref();
    let train = load_dataset_auto(find_split_file(dir, &["train"])?, text_field, label_field, Split::Train)?;
    let names = train.label_names.clone();
    let validation = load_dataset_auto(
        find_split_file(dir, &["validation", "val", "dev"])?,
        text_field,
        label_field,
        Split::Validation,
    )?
    .relabel(&names)?;
    let test = load_dataset_auto(find_split_file(dir, &["test"])?, text_field, label_field, Split::Test)?.relabel(&names)?;
    Ok(Splits { train, validation, test })
}

/// One padded, masked batch. `input_ids` and `attention_mask` are row-major
/// `[batch_size, seq_len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub input_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub labels: Vec<usize>,
}

/// A dataset after tokenization, every row padded to `seq_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDataset {
    pub seq_len: usize,
    pub ids: Vec<Vec<usize>>,
    pub masks: Vec<Vec<u8>>,
    pub labels: Vec<usize>,
    pub num_labels: usize,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch_of(&self, rows: &[usize]) -> Batch {
        let mut b = Batch {
            batch_size: rows.len(),
            seq_len: self.seq_len,
            input_ids: Vec::with_capacity(rows.len() * self.seq_len),
            attention_mask: Vec::with_capacity(rows.len() * self.seq_len),
            labels: Vec::with_capacity(rows.len()),
        };
        for &r in rows {
            b.input_ids.extend_from_slice(&self.ids[r]);
            b.attention_mask.extend_from_slice(&self.masks[r]);
            b.labels.push(self.labels[r]);
        }
        b
    }
}

pub fn encode_dataset(dataset: &LabeledDataset, vocab: &Vocab, max_len: usize) -> Result<EncodedDataset> {
    let mut out = EncodedDataset {
        seq_len: max_len,
        ids: Vec::with_capacity(dataset.len()),
        masks: Vec::with_capacity(dataset.len()),
        labels: Vec::with_capacity(dataset.len()),
        num_labels: dataset.label_names.len(),
    };
    for ex in &dataset.examples {
        let (ids, mask) = encode_example(&ex.text, vocab, max_len)?;
        out.ids.push(ids);
        out.masks.push(mask);
        out.labels.push(ex.label);
    }
    Ok(out)
}

/// Example order for one epoch: identity, or a Fisher–Yates shuffle keyed by
/// `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = rng::stream(seed, &[rng::tag("shuffle"), epoch]);
        order.shuffle(&mut rng);
    }
    order
}

/// Partitions one epoch into batches; the final batch may be short.
pub fn batches(dataset: &EncodedDataset, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Input("batch_size must be at least 1".into()));
    }
    let order = epoch_order(dataset.len(), seed, epoch, shuffle);
    Ok(order.chunks(batch_size).map(|rows| dataset.batch_of(rows)).collect())
}
