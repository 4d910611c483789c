//! Core value types shared by every other module: finite index spaces,
//! feature maps, preference records, datasets, and dataset partitioning.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Real;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: {field} = {value} outside score scale [{lo}, {hi}]")]
    ScoreOutOfRange {
        line: usize,
        field: String,
        value: i64,
        lo: i64,
        hi: i64,
    },
    #[error("line {line}: chosen equals rejected")]
    ChosenEqualsRejected { line: usize },
    #[error("t_parts must be >= 1")]
    EmptyPartition,
    #[error("invalid space: {0}")]
    InvalidSpace(String),
    #[error("expected an index-valued {field}, found text {text:?}")]
    NotAnIndex { field: String, text: String },
    #[error("record {id:?} is missing judge scores")]
    MissingScores { id: String },
}

/// Finite set of prompts or responses, identified by index, with optional
/// display labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSpace {
    pub size: usize,
    pub labels: Option<Vec<String>>,
}

pub type PromptSpace = IndexSpace;
pub type ResponseSpace = IndexSpace;

impl IndexSpace {
    pub fn new(size: usize) -> Result<Self, DomainError> {
        Self::with_labels(size, None)
    }

    pub fn with_labels(size: usize, labels: Option<Vec<String>>) -> Result<Self, DomainError> {
        if size == 0 {
            return Err(DomainError::InvalidSpace("size must be >= 1".into()));
        }
        if let Some(ref l) = labels {
            if l.len() != size {
                return Err(DomainError::InvalidSpace(format!(
                    "expected {size} labels, found {}",
                    l.len()
                )));
            }
        }
        Ok(IndexSpace { size, labels })
    }

    pub fn label(&self, i: usize) -> String {
        match &self.labels {
            Some(l) => l[i].clone(),
            None => i.to_string(),
        }
    }
}

/// How feature vectors are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FeatureMode {
    OneHot,
    RandomGaussian { seed: u64 },
}

/// Feature vectors phi(x, y) for every (prompt, response) pair, stored
/// row-major as a flat buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap<R> {
    pub dim: usize,
    pub mode: FeatureMode,
    pub num_prompts: usize,
    pub num_responses: usize,
    values: Vec<R>,
}

impl<R: Real> FeatureMap<R> {
    /// Standard-basis features with d = |X| * |Y|.
    pub fn one_hot(num_prompts: usize, num_responses: usize) -> Self {
        let dim = num_prompts * num_responses;
        let mut values = vec![R::zero(); dim * dim];
        for pair in 0..dim {
            values[pair * dim + pair] = R::one();
        }
        FeatureMap {
            dim,
            mode: FeatureMode::OneHot,
            num_prompts,
            num_responses,
            values,
        }
    }

    /// Gaussian features fully determined by the seed: the same seed yields
    /// bitwise-identical values.
    pub fn random_gaussian(num_prompts: usize, num_responses: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = num_prompts * num_responses * dim;
        let values: Vec<R> = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                R::of(v)
            })
            .collect();
        FeatureMap {
            dim,
            mode: FeatureMode::RandomGaussian { seed },
            num_prompts,
            num_responses,
            values,
        }
    }

    pub fn phi(&self, prompt: usize, response: usize) -> &[R] {
        let pair = prompt * self.num_responses + response;
        &self.values[pair * self.dim..(pair + 1) * self.dim]
    }
}

/// A prompt or response reference: an index into a finite space, or display
/// text. The math operates on indices; text is carried through IO untouched.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Item {
    Index(usize),
    Text(String),
}

impl Item {
    pub fn as_index(&self, field: &str) -> Result<usize, DomainError> {
        match self {
            Item::Index(i) => Ok(*i),
            Item::Text(t) => Err(DomainError::NotAnIndex {
                field: field.to_string(),
                text: t.clone(),
            }),
        }
    }
}

impl fmt::Display for Item {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Item::Index(i) => write!(f, "{i}"),
            Item::Text(t) => write!(f, "{t}"),
        }
    }
}

/// One pairwise comparison: prompt, chosen response, rejected response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub id: String,
    pub prompt: Item,
    pub chosen: Item,
    pub rejected: Item,
}

/// A preference triple with judge scores for both responses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub triple: PreferenceTriple,
    pub chosen_score: i64,
    pub rejected_score: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Record {
    Scored(ScoredPair),
    Plain(PreferenceTriple),
}

impl Record {
    pub fn triple(&self) -> &PreferenceTriple {
        match self {
            Record::Plain(t) => t,
            Record::Scored(s) => &s.triple,
        }
    }

    pub fn id(&self) -> &str {
        &self.triple().id
    }

    pub fn scores(&self) -> Option<(i64, i64)> {
        match self {
            Record::Plain(_) => None,
            Record::Scored(s) => Some((s.chosen_score, s.rejected_score)),
        }
    }
}

/// JSONL schema selector for [`load_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSchema {
    Plain,
    Scored,
}

/// Ordered list of preference records plus free-form provenance metadata.
///
/// Unknown JSONL keys are preserved in `provenance["extra_fields"][id]` and
/// re-emitted on save, so load/save round-trips are field-for-field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PreferenceDataset {
    pub records: Vec<Record>,
    pub provenance: serde_json::Map<String, serde_json::Value>,
}

impl PreferenceDataset {
    pub fn from_records(records: Vec<Record>) -> Self {
        PreferenceDataset {
            records,
            provenance: serde_json::Map::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Score scale upper bound declared in metadata; defaults to 10.
    pub fn score_scale_max(&self) -> i64 {
        self.provenance
            .get("score_scale_max")
            .and_then(|v| v.as_i64())
            .unwrap_or(10)
    }

    fn extra_fields(
        &self,
        id: &str,
    ) -> Option<&serde_json::Map<String, serde_json::Value>> {
        self.provenance
            .get("extra_fields")
            .and_then(|v| v.as_object())
            .and_then(|m| m.get(id))
            .and_then(|v| v.as_object())
    }
}

const KNOWN_KEYS: [&str; 6] = [
    "id",
    "prompt",
    "chosen",
    "rejected",
    "chosen_score",
    "rejected_score",
];

fn parse_item(
    map: &serde_json::Map<String, serde_json::Value>,
    key: &str,
    line: usize,
) -> Result<Item, DomainError> {
    let v = map.get(key).ok_or_else(|| DomainError::MalformedLine {
        line,
        message: format!("missing field {key:?}"),
    })?;
    serde_json::from_value(v.clone()).map_err(|_| DomainError::MalformedLine {
        line,
        message: format!("field {key:?} must be a string or a nonnegative integer"),
    })
}

fn parse_score(
    map: &serde_json::Map<String, serde_json::Value>,
    key: &str,
    line: usize,
    scale_max: i64,
) -> Result<i64, DomainError> {
    let v = map
        .get(key)
        .and_then(|v| v.as_i64())
        .ok_or_else(|| DomainError::MalformedLine {
            line,
            message: format!("missing or non-integer field {key:?}"),
        })?;
    if v < 1 || v > scale_max {
        return Err(DomainError::ScoreOutOfRange {
            line,
            field: key.to_string(),
            value: v,
            lo: 1,
            hi: scale_max,
        });
    }
    Ok(v)
}

/// Load a JSONL preference dataset, preserving line order. Any record that
/// fails validation rejects the whole load with its line number.
pub fn load_dataset<P: AsRef<Path>>(
    path: P,
    schema: DatasetSchema,
) -> Result<PreferenceDataset, DomainError> {
    load_dataset_with_scale(path, schema, 10)
}

pub fn load_dataset_with_scale<P: AsRef<Path>>(
    path: P,
    schema: DatasetSchema,
    scale_max: i64,
) -> Result<PreferenceDataset, DomainError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DomainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut records = Vec::new();
    let mut seen_ids = BTreeSet::new();
    let mut extras = serde_json::Map::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DomainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&line)
            .map_err(|e| DomainError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        let id = map
            .get("id")
            .and_then(|v| v.as_str())
            .ok_or_else(|| DomainError::MalformedLine {
                line: line_no,
                message: "missing string field \"id\"".into(),
            })?
            .to_string();
        if !seen_ids.insert(id.clone()) {
            return Err(DomainError::DuplicateId { line: line_no, id });
        }
        let prompt = parse_item(&map, "prompt", line_no)?;
        let chosen = parse_item(&map, "chosen", line_no)?;
        let rejected = parse_item(&map, "rejected", line_no)?;
        if chosen == rejected {
            return Err(DomainError::ChosenEqualsRejected { line: line_no });
        }
        let triple = PreferenceTriple {
            id: id.clone(),
            prompt,
            chosen,
            rejected,
        };
        let record = match schema {
            DatasetSchema::Plain => Record::Plain(triple),
            DatasetSchema::Scored => {
                let chosen_score = parse_score(&map, "chosen_score", line_no, scale_max)?;
                let rejected_score = parse_score(&map, "rejected_score", line_no, scale_max)?;
                if chosen_score < rejected_score {
                    log::warn!(
                        "line {line_no}: chosen_score {chosen_score} < rejected_score {rejected_score}"
                    );
                }
                Record::Scored(ScoredPair {
                    triple,
                    chosen_score,
                    rejected_score,
                })
            }
        };
        let unknown: serde_json::Map<String, serde_json::Value> = map
            .into_iter()
            .filter(|(k, _)| !KNOWN_KEYS.contains(&k.as_str()))
            .collect();
        if !unknown.is_empty() {
            extras.insert(id, serde_json::Value::Object(unknown));
        }
        records.push(record);
    }

    let mut dataset = PreferenceDataset::from_records(records);
    dataset
        .provenance
        .insert("score_scale_max".into(), scale_max.into());
    if !extras.is_empty() {
        dataset
            .provenance
            .insert("extra_fields".into(), serde_json::Value::Object(extras));
    }
    Ok(dataset)
}

fn item_value(item: &Item) -> serde_json::Value {
    match item {
        Item::Index(i) => serde_json::Value::from(*i),
        Item::Text(t) => serde_json::Value::from(t.clone()),
    }
}

/// Write a dataset as JSONL with keys in the canonical order; unknown keys
/// recorded in provenance follow the known ones.
pub fn save_dataset<P: AsRef<Path>>(
    dataset: &PreferenceDataset,
    path: P,
) -> Result<(), DomainError> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|source| DomainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    for record in &dataset.records {
        let triple = record.triple();
        let mut map = serde_json::Map::new();
        map.insert("id".into(), triple.id.clone().into());
        if let Some(extra) = dataset.extra_fields(&triple.id) {
            for (k, v) in extra {
                map.insert(k.clone(), v.clone());
            }
        }
        map.insert("prompt".into(), item_value(&triple.prompt));
        map.insert("chosen".into(), item_value(&triple.chosen));
        map.insert("rejected".into(), item_value(&triple.rejected));
        if let Some((w, l)) = record.scores() {
            map.insert("chosen_score".into(), w.into());
            map.insert("rejected_score".into(), l.into());
        }
        let line = serde_json::to_string(&map).expect("record serialization");
        writeln!(file, "{line}").map_err(|source| DomainError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

/// Split a dataset into `t_parts` order-preserving contiguous parts whose
/// sizes differ by at most one; earlier parts take the remainder.
pub fn partition_dataset(
    dataset: &PreferenceDataset,
    t_parts: usize,
) -> Result<Vec<PreferenceDataset>, DomainError> {
    if t_parts == 0 {
        return Err(DomainError::EmptyPartition);
    }
    let n = dataset.len();
    let base = n / t_parts;
    let remainder = n % t_parts;
    let mut parts = Vec::with_capacity(t_parts);
    let mut start = 0;
    for k in 0..t_parts {
        let size = base + usize::from(k < remainder);
        let mut part = PreferenceDataset::from_records(dataset.records[start..start + size].to_vec());
        part.provenance = dataset.provenance.clone();
        part.provenance.insert("partition_index".into(), k.into());
        parts.push(part);
        start += size;
    }
    Ok(parts)
}
