//! Instance data: loading, binarization and the conditioning sets used by the
//! fairness metrics and losses.
//!
//! A dataset file is JSON-lines, one record per line:
//!
//! ```json
//! {"id": "c1", "text": "...", "split": "train",
//!  "label_proportions": {"toxicity": 0.0},
//!  "group_proportions": {"jewish": 0.2, "christian": 0.0}}
//! ```
//!
//! Proportions are rater fractions. Any non-zero fraction makes the instance a
//! positive for that label or a member of that group. Embeddings live in a
//! companion file keyed by id, either JSON-lines (`{"id": .., "embedding": [..]}`)
//! or CSV (`id,e0,e1,...`).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("instance {id}: {field} proportion {value} is outside [0, 1]")]
    Proportion { id: String, field: String, value: f64 },
    #[error("record on line {line} has an empty id")]
    MissingId { line: usize },
    #[error("duplicate id {id}")]
    DuplicateId { id: String },
    #[error("instance {id}: unknown split {name:?} (expected train, validation or test)")]
    UnknownSplit { id: String, name: String },
    #[error("instance {id}: target label {label:?} is missing")]
    MissingLabel { id: String, label: String },
    #[error("instance {id}: baseline probability {value} is not strictly inside (0, 1)")]
    BaselineRange { id: String, value: f64 },
    #[error("instance {id}: embedding has length {found}, expected {expected}")]
    DimensionMismatch { id: String, expected: usize, found: usize },
    #[error("instance {id}: no embedding in the companion file")]
    MissingEmbedding { id: String },
    #[error("group pair ({group}, {majority}) names the same group twice")]
    DegeneratePair { group: String, majority: String },
    #[error("unknown group {name:?}; known groups: {known:?}")]
    UnknownGroup { name: String, known: Vec<String> },
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One line of a dataset file, before binarization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawInstance {
    pub id: String,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub label_proportions: BTreeMap<String, f64>,
    #[serde(default)]
    pub group_proportions: BTreeMap<String, f64>,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub embedding: Vec<f64>,
    pub label: bool,
    pub groups: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_prob: Option<f64>,
}

impl Example {
    pub fn in_group(&self, name: &str) -> bool {
        self.groups.contains(name)
    }
}

/// A (group, majority) comparison, e.g. ("muslim", "christian").
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupPair {
    pub group: String,
    pub majority: String,
}

impl GroupPair {
    pub fn new(group: impl Into<String>, majority: impl Into<String>) -> Result<Self, DatasetError> {
        let pair = GroupPair {
            group: group.into(),
            majority: majority.into(),
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.group == self.majority {
            return Err(DatasetError::DegeneratePair {
                group: self.group.clone(),
                majority: self.majority.clone(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for GroupPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.group, self.majority)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupConfig {
    pub pairs: Vec<GroupPair>,
}

impl GroupConfig {
    pub fn new(pairs: Vec<GroupPair>) -> Result<Self, DatasetError> {
        for pair in &pairs {
            pair.validate()?;
        }
        Ok(GroupConfig { pairs })
    }

    /// Every name referenced by some pair, in sorted order.
    pub fn names(&self) -> BTreeSet<String> {
        self.pairs
            .iter()
            .flat_map(|p| [p.group.clone(), p.majority.clone()])
            .collect()
    }
}

/// How to turn a dataset file into a [`Dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    /// Label column binarized into `Example::label`, e.g. "toxicity".
    pub target_label: String,
    /// Group columns to keep. Empty keeps every group column present.
    #[serde(default)]
    pub groups: Vec<String>,
    #[serde(default)]
    pub pairs: Vec<GroupPair>,
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    /// Expected embedding length; inferred from the embedding file when absent.
    #[serde(default)]
    pub dimension: Option<usize>,
}

/// Immutable train/validation/test collection.
///
/// `dimension` is zero when no embeddings are attached (prompt-only flows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dimension: usize,
    splits: BTreeMap<Split, Vec<Example>>,
    group_table: GroupConfig,
    group_names: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<serde_json::Value>,
}

impl Dataset {
    pub fn new(
        dimension: usize,
        mut splits: BTreeMap<Split, Vec<Example>>,
        group_table: GroupConfig,
    ) -> Result<Self, DatasetError> {
        for pair in &group_table.pairs {
            pair.validate()?;
        }
        for split in Split::ALL {
            splits.entry(split).or_default();
        }
        let mut group_names = group_table.names();
        for examples in splits.values() {
            let mut seen = HashSet::with_capacity(examples.len());
            for ex in examples {
                if ex.embedding.len() != dimension {
                    return Err(DatasetError::DimensionMismatch {
                        id: ex.id.clone(),
                        expected: dimension,
                        found: ex.embedding.len(),
                    });
                }
                if let Some(p) = ex.baseline_prob {
                    if !(p > 0.0 && p < 1.0) {
                        return Err(DatasetError::BaselineRange {
                            id: ex.id.clone(),
                            value: p,
                        });
                    }
                }
                if !seen.insert(ex.id.as_str()) {
                    return Err(DatasetError::DuplicateId { id: ex.id.clone() });
                }
                group_names.extend(ex.groups.iter().cloned());
            }
        }
        Ok(Dataset {
            dimension,
            splits,
            group_table,
            group_names,
            metadata: None,
        })
    }

    pub fn with_metadata(mut self, metadata: serde_json::Value) -> Self {
        self.metadata = Some(metadata);
        self
    }

    /// Registers group names that were declared but may not occur in any example.
    pub fn with_declared_groups<I: IntoIterator<Item = String>>(mut self, names: I) -> Self {
        self.group_names.extend(names);
        self
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn group_table(&self) -> &GroupConfig {
        &self.group_table
    }

    pub fn metadata(&self) -> Option<&serde_json::Value> {
        self.metadata.as_ref()
    }

    pub fn split(&self, split: Split) -> &[Example] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.splits.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn examples(&self) -> impl Iterator<Item = &Example> {
        self.splits.values().flatten()
    }

    pub fn known_groups(&self) -> &BTreeSet<String> {
        &self.group_names
    }

    /// Group names referenced by the group table that no example belongs to.
    pub fn unseen_groups(&self) -> Vec<String> {
        let observed: HashSet<&str> = self
            .examples()
            .flat_map(|ex| ex.groups.iter().map(String::as_str))
            .collect();
        self.group_table
            .names()
            .into_iter()
            .filter(|name| !observed.contains(name.as_str()))
            .collect()
    }

    fn check_group(&self, name: &str) -> Result<(), DatasetError> {
        if self.group_names.contains(name) {
            Ok(())
        } else {
            Err(DatasetError::UnknownGroup {
                name: name.to_string(),
                known: self.group_names.iter().cloned().collect(),
            })
        }
    }

    /// Examples of `split` with label 0 that belong to `group`, in dataset order.
    pub fn group_negatives(&self, split: Split, group: &str) -> Result<Vec<&Example>, DatasetError> {
        self.check_group(group)?;
        Ok(self
            .split(split)
            .iter()
            .filter(|ex| !ex.label && ex.in_group(group))
            .collect())
    }

    /// Examples of `split` with label 1 that belong to `group`, in dataset order.
    pub fn group_positives(&self, split: Split, group: &str) -> Result<Vec<&Example>, DatasetError> {
        self.check_group(group)?;
        Ok(self
            .split(split)
            .iter()
            .filter(|ex| ex.label && ex.in_group(group))
            .collect())
    }
}

/// Out-of-range rater proportion.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("proportion {0} is outside [0, 1]")]
pub struct ProportionError(pub f64);

/// Any non-zero rater proportion counts as a positive.
pub fn binarize(p: f64) -> Result<bool, ProportionError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(ProportionError(p));
    }
    Ok(p > 0.0)
}

/// Embeddings keyed by instance id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    dimension: usize,
    rows: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize, Serialize)]
struct EmbeddingRecord {
    id: String,
    embedding: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dimension: usize) -> Self {
        EmbeddingTable {
            dimension,
            rows: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, embedding: Vec<f64>) -> Result<(), DatasetError> {
        let id = id.into();
        if embedding.len() != self.dimension {
            return Err(DatasetError::DimensionMismatch {
                id,
                expected: self.dimension,
                found: embedding.len(),
            });
        }
        if self.rows.contains_key(&id) {
            return Err(DatasetError::DuplicateId { id });
        }
        self.rows.insert(id, embedding);
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.rows.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Loads a `.csv` table (`id,e0,...`, optional header) or a JSON-lines table.
    /// `expected` pins the dimension; otherwise the first row decides it.
    pub fn load(path: &Path, expected: Option<usize>) -> Result<Self, DatasetError> {
        let is_csv = path
            .extension()
            .map(|ext| ext.eq_ignore_ascii_case("csv"))
            .unwrap_or(false);
        let rows = if is_csv {
            read_embedding_csv(path)?
        } else {
            read_embedding_jsonl(path)?
        };
        let dimension = expected.or_else(|| rows.first().map(|(_, e)| e.len())).unwrap_or(0);
        let mut table = EmbeddingTable::new(dimension);
        for (id, embedding) in rows {
            table.insert(id, embedding)?;
        }
        Ok(table)
    }

    /// Writes the rows for `ids` as JSON-lines, in the given order.
    pub fn write_jsonl<'a, I>(&self, path: &Path, ids: I) -> Result<(), DatasetError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let file = File::create(path).map_err(|e| DatasetError::io(path, e))?;
        let mut out = BufWriter::new(file);
        for id in ids {
            let embedding = self
                .get(id)
                .ok_or_else(|| DatasetError::MissingEmbedding { id: id.to_string() })?;
            let line = serde_json::to_string(&EmbeddingRecord {
                id: id.to_string(),
                embedding: embedding.to_vec(),
            })
            .expect("embedding records always serialize");
            writeln!(out, "{line}").map_err(|e| DatasetError::io(path, e))?;
        }
        out.flush().map_err(|e| DatasetError::io(path, e))
    }
}

fn read_embedding_jsonl(path: &Path) -> Result<Vec<(String, Vec<f64>)>, DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        rows.push((rec.id, rec.embedding));
    }
    Ok(rows)
}

fn read_embedding_csv(path: &Path) -> Result<Vec<(String, Vec<f64>)>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let Some(id) = record.get(0) else { continue };
        let values: Result<Vec<f64>, _> = record.iter().skip(1).map(str::parse::<f64>).collect();
        match values {
            Ok(values) => rows.push((id.to_string(), values)),
            // header row
            Err(_) if idx == 0 => continue,
            Err(e) => {
                return Err(DatasetError::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(rows)
}

/// Reads raw records from a JSON-lines dataset file.
pub fn read_raw_instances(path: &Path) -> Result<Vec<RawInstance>, DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawInstance = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if raw.id.is_empty() {
            return Err(DatasetError::MissingId { line: idx + 1 });
        }
        out.push(raw);
    }
    Ok(out)
}

fn binarize_field(id: &str, field: &str, p: f64) -> Result<bool, DatasetError> {
    binarize(p).map_err(|ProportionError(value)| DatasetError::Proportion {
        id: id.to_string(),
        field: field.to_string(),
        value,
    })
}

/// Converts raw records into a dataset. `embeddings` must cover every record when given.
pub fn build_dataset(
    raws: Vec<RawInstance>,
    config: &IngestConfig,
    embeddings: Option<&EmbeddingTable>,
) -> Result<Dataset, DatasetError> {
    let dimension = match (embeddings, config.dimension) {
        (Some(table), Some(d)) if table.dimension() != d => {
            let id = table.rows.keys().min().cloned().unwrap_or_default();
            return Err(DatasetError::DimensionMismatch {
                id,
                expected: d,
                found: table.dimension(),
            });
        }
        (Some(table), _) => table.dimension(),
        (None, _) => 0,
    };

    let mut seen = HashSet::with_capacity(raws.len());
    let mut splits: BTreeMap<Split, Vec<Example>> = BTreeMap::new();
    for raw in raws {
        if !seen.insert(raw.id.clone()) {
            return Err(DatasetError::DuplicateId { id: raw.id });
        }
        let split: Split = raw.split.parse().map_err(|_| DatasetError::UnknownSplit {
            id: raw.id.clone(),
            name: raw.split.clone(),
        })?;
        for (name, &p) in &raw.label_proportions {
            binarize_field(&raw.id, name, p)?;
        }
        for (name, &p) in &raw.group_proportions {
            binarize_field(&raw.id, name, p)?;
        }
        let label = match raw.label_proportions.get(&config.target_label) {
            Some(&p) => binarize_field(&raw.id, &config.target_label, p)?,
            None => {
                return Err(DatasetError::MissingLabel {
                    id: raw.id,
                    label: config.target_label.clone(),
                })
            }
        };
        let groups: BTreeSet<String> = if config.groups.is_empty() {
            raw.group_proportions
                .iter()
                .filter(|(_, &p)| p > 0.0)
                .map(|(name, _)| name.clone())
                .collect()
        } else {
            config
                .groups
                .iter()
                .filter(|name| raw.group_proportions.get(*name).is_some_and(|&p| p > 0.0))
                .cloned()
                .collect()
        };
        let embedding = match embeddings {
            Some(table) => table
                .get(&raw.id)
                .ok_or_else(|| DatasetError::MissingEmbedding { id: raw.id.clone() })?
                .to_vec(),
            None => Vec::new(),
        };
        let text = if raw.text.is_empty() { None } else { Some(raw.text) };
        splits.entry(split).or_default().push(Example {
            id: raw.id,
            embedding,
            label,
            groups,
            text,
            baseline_prob: raw.baseline_prob,
        });
    }

    let dataset = Dataset::new(dimension, splits, GroupConfig::new(config.pairs.clone())?)?
        .with_declared_groups(config.groups.iter().cloned());
    for name in dataset.unseen_groups() {
        log::warn!("group {name:?} is referenced by a pair but no example belongs to it");
    }
    Ok(dataset)
}

/// Loads a JSON-lines dataset file plus its optional embedding companion.
pub fn load_dataset(path: &Path, config: &IngestConfig) -> Result<Dataset, DatasetError> {
    let raws = read_raw_instances(path)?;
    let embeddings = match &config.embeddings {
        Some(emb_path) => Some(EmbeddingTable::load(emb_path, config.dimension)?),
        None => None,
    };
    build_dataset(raws, config, embeddings.as_ref())
}

/// Writes `dataset` back out as a dataset file plus a JSON-lines embedding file.
///
/// Labels and memberships are written as proportions 0.0 / 1.0 over `target_label`
/// and every known group name, so loading the files with the returned config
/// reproduces the examples.
pub fn write_dataset(
    dataset: &Dataset,
    target_label: &str,
    records_path: &Path,
    embeddings_path: Option<&Path>,
) -> Result<IngestConfig, DatasetError> {
    let file = File::create(records_path).map_err(|e| DatasetError::io(records_path, e))?;
    let mut out = BufWriter::new(file);
    let groups: Vec<String> = dataset.known_groups().iter().cloned().collect();
    for split in Split::ALL {
        for ex in dataset.split(split) {
            let raw = RawInstance {
                id: ex.id.clone(),
                text: ex.text.clone().unwrap_or_default(),
                label_proportions: BTreeMap::from([(target_label.to_string(), if ex.label { 1.0 } else { 0.0 })]),
                group_proportions: groups
                    .iter()
                    .map(|g| (g.clone(), if ex.in_group(g) { 1.0 } else { 0.0 }))
                    .collect(),
                split: split.as_str().to_string(),
                baseline_prob: ex.baseline_prob,
            };
            let line = serde_json::to_string(&raw).expect("raw instances always serialize");
            writeln!(out, "{line}").map_err(|e| DatasetError::io(records_path, e))?;
        }
    }
    out.flush().map_err(|e| DatasetError::io(records_path, e))?;

    if let Some(emb_path) = embeddings_path {
        let file = File::create(emb_path).map_err(|e| DatasetError::io(emb_path, e))?;
        let mut out = BufWriter::new(file);
        for ex in dataset.examples() {
            let line = serde_json::to_string(&EmbeddingRecord {
                id: ex.id.clone(),
                embedding: ex.embedding.clone(),
            })
            .expect("embedding records always serialize");
            writeln!(out, "{line}").map_err(|e| DatasetError::io(emb_path, e))?;
        }
        out.flush().map_err(|e| DatasetError::io(emb_path, e))?;
    }

    Ok(IngestConfig {
        target_label: target_label.to_string(),
        groups,
        pairs: dataset.group_table().pairs.clone(),
        embeddings: embeddings_path.map(Path::to_path_buf),
        dimension: embeddings_path.map(|_| dataset.dimension()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(id: &str, label: bool, groups: &[&str]) -> Example {
        Example {
            id: id.to_string(),
            embedding: vec![],
            label,
            groups: groups.iter().map(|g| g.to_string()).collect(),
            text: None,
            baseline_prob: None,
        }
    }

    fn toy() -> Dataset {
        let train = vec![
            example("a", false, &["jewish"]),
            example("b", true, &["jewish"]),
            example("c", false, &["christian"]),
            example("d", false, &["jewish", "christian"]),
            example("e", true, &["christian"]),
        ];
        Dataset::new(
            0,
            BTreeMap::from([(Split::Train, train)]),
            GroupConfig::new(vec![GroupPair::new("jewish", "christian").unwrap()]).unwrap(),
        )
        .unwrap()
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f
    }

    fn ingest(target: &str) -> IngestConfig {
        IngestConfig {
            target_label: target.to_string(),
            groups: vec![],
            pairs: vec![],
            embeddings: None,
            dimension: None,
        }
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize(0.0), Ok(false));
        assert_eq!(binarize(0.35), Ok(true));
        assert_eq!(binarize(1.0), Ok(true));
        assert!(binarize(1.5).is_err());
        assert!(binarize(-0.1).is_err());
        assert!(binarize(f64::NAN).is_err());
    }

    #[test]
    fn binarize_is_idempotent() {
        for p in [0.0, 1e-9, 0.2, 0.5, 1.0] {
            let once = binarize(p).unwrap();
            let twice = binarize(if once { 1.0 } else { 0.0 }).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn group_negatives_filters_in_order() {
        let ds = toy();
        let ids: Vec<&str> = ds
            .group_negatives(Split::Train, "jewish")
            .unwrap()
            .iter()
            .map(|e| e.id.as_str())
            .collect();
        assert_eq!(ids, ["a", "d"]);
        let ids: Vec<&str> = ds
            .group_negatives(Split::Train, "christian")
            .unwrap()
            .iter()
            .map(|e| e.id.as_str())
            .collect();
        assert_eq!(ids, ["c", "d"]);
        assert!(ds.group_negatives(Split::Test, "jewish").unwrap().is_empty());
    }

    #[test]
    fn unknown_group_lists_known_names() {
        let err = toy().group_negatives(Split::Train, "muslim").unwrap_err();
        match err {
            DatasetError::UnknownGroup { known, .. } => {
                assert_eq!(known, ["christian", "jewish"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn loads_and_binarizes_records() {
        let f = write_lines(&[
            r#"{"id":"1","text":"hi","split":"train","label_proportions":{"toxicity":0.0},"group_proportions":{"jewish":0.2}}"#,
            r#"{"id":"2","text":"","split":"test","label_proportions":{"toxicity":0.6},"group_proportions":{"jewish":0.0}}"#,
        ]);
        let ds = load_dataset(f.path(), &ingest("toxicity")).unwrap();
        let first = &ds.split(Split::Train)[0];
        assert!(!first.label);
        assert_eq!(first.groups, BTreeSet::from(["jewish".to_string()]));
        assert_eq!(first.text.as_deref(), Some("hi"));
        let second = &ds.split(Split::Test)[0];
        assert!(second.label);
        assert!(second.groups.is_empty());
        assert_eq!(second.text, None);
    }

    #[test]
    fn empty_file_gives_empty_splits() {
        let f = write_lines(&[]);
        let ds = load_dataset(f.path(), &ingest("toxicity")).unwrap();
        assert!(ds.is_empty());
        for split in Split::ALL {
            assert!(ds.split(split).is_empty());
        }
    }

    #[test]
    fn rejects_bad_records() {
        let range = write_lines(&[r#"{"id":"x","split":"train","label_proportions":{"toxicity":1.5}}"#]);
        match load_dataset(range.path(), &ingest("toxicity")).unwrap_err() {
            DatasetError::Proportion { id, value, .. } => {
                assert_eq!(id, "x");
                assert_eq!(value, 1.5);
            }
            other => panic!("unexpected {other:?}"),
        }

        let missing = write_lines(&[r#"{"id":"x","split":"train","label_proportions":{"insult":0.5}}"#]);
        assert!(matches!(
            load_dataset(missing.path(), &ingest("toxicity")),
            Err(DatasetError::MissingLabel { .. })
        ));

        let dup = write_lines(&[
            r#"{"id":"x","split":"train","label_proportions":{"toxicity":0}}"#,
            r#"{"id":"x","split":"test","label_proportions":{"toxicity":0}}"#,
        ]);
        assert!(matches!(
            load_dataset(dup.path(), &ingest("toxicity")),
            Err(DatasetError::DuplicateId { .. })
        ));

        let split = write_lines(&[r#"{"id":"x","split":"dev","label_proportions":{"toxicity":0}}"#]);
        assert!(matches!(
            load_dataset(split.path(), &ingest("toxicity")),
            Err(DatasetError::UnknownSplit { .. })
        ));

        let no_id = write_lines(&[r#"{"id":"","split":"train","label_proportions":{"toxicity":0}}"#]);
        assert!(matches!(
            load_dataset(no_id.path(), &ingest("toxicity")),
            Err(DatasetError::MissingId { line: 1 })
        ));
    }

    #[test]
    fn attaches_embeddings_from_jsonl_and_csv() {
        let records = write_lines(&[
            r#"{"id":"1","split":"train","label_proportions":{"toxicity":0.0}}"#,
            r#"{"id":"2","split":"train","label_proportions":{"toxicity":1.0}}"#,
        ]);
        let jsonl = write_lines(&[
            r#"{"id":"2","embedding":[3.0,4.0]}"#,
            r#"{"id":"1","embedding":[1.0,2.0]}"#,
        ]);
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("emb.csv");
        std::fs::write(&csv_path, "id,e0,e1\n1,1.0,2.0\n2,3.0,4.0\n").unwrap();

        for emb in [jsonl.path().to_path_buf(), csv_path] {
            let mut cfg = ingest("toxicity");
            cfg.embeddings = Some(emb);
            let ds = load_dataset(records.path(), &cfg).unwrap();
            assert_eq!(ds.dimension(), 2);
            assert_eq!(ds.split(Split::Train)[0].embedding, [1.0, 2.0]);
            assert_eq!(ds.split(Split::Train)[1].embedding, [3.0, 4.0]);
        }
    }

    #[test]
    fn embedding_dimension_mismatch_is_an_error() {
        let records = write_lines(&[r#"{"id":"1","split":"train","label_proportions":{"toxicity":0.0}}"#]);
        let emb = write_lines(&[r#"{"id":"1","embedding":[1.0,2.0]}"#]);
        let mut cfg = ingest("toxicity");
        cfg.embeddings = Some(emb.path().to_path_buf());
        cfg.dimension = Some(3);
        assert!(matches!(
            load_dataset(records.path(), &cfg),
            Err(DatasetError::DimensionMismatch {
                expected: 3,
                found: 2,
                ..
            })
        ));

        let ragged = write_lines(&[r#"{"id":"1","embedding":[1.0,2.0]}"#, r#"{"id":"2","embedding":[1.0]}"#]);
        assert!(matches!(
            EmbeddingTable::load(ragged.path(), None),
            Err(DatasetError::DimensionMismatch { .. })
        ));

        let short = write_lines(&[]);
        cfg.embeddings = Some(short.path().to_path_buf());
        cfg.dimension = None;
        assert!(matches!(
            load_dataset(records.path(), &cfg),
            Err(DatasetError::MissingEmbedding { .. })
        ));
    }

    #[test]
    fn restricts_to_configured_groups_and_flags_unseen_pairs() {
        let f = write_lines(&[
            r#"{"id":"1","split":"train","label_proportions":{"toxicity":0.0},"group_proportions":{"jewish":0.2,"male":0.5}}"#,
        ]);
        let mut cfg = ingest("toxicity");
        cfg.groups = vec!["jewish".into(), "christian".into()];
        cfg.pairs = vec![GroupPair::new("jewish", "christian").unwrap()];
        let ds = load_dataset(f.path(), &cfg).unwrap();
        let ex = &ds.split(Split::Train)[0];
        assert_eq!(ex.groups, BTreeSet::from(["jewish".to_string()]));
        assert_eq!(ds.unseen_groups(), ["christian"]);
        // declared but unobserved names are still valid conditioning targets
        assert!(ds.group_negatives(Split::Train, "christian").unwrap().is_empty());
    }

    #[test]
    fn degenerate_pair_rejected() {
        assert!(matches!(
            GroupPair::new("a", "a"),
            Err(DatasetError::DegeneratePair { .. })
        ));
    }

    #[test]
    fn write_then_load_round_trips() {
        let mut ds = toy();
        // give it embeddings so the companion file is exercised
        let mut splits = BTreeMap::new();
        for split in Split::ALL {
            let exs: Vec<Example> = ds
                .split(split)
                .iter()
                .enumerate()
                .map(|(i, e)| Example {
                    embedding: vec![i as f64, 0.5],
                    ..e.clone()
                })
                .collect();
            splits.insert(split, exs);
        }
        ds = Dataset::new(2, splits, ds.group_table().clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let records = dir.path().join("data.jsonl");
        let emb = dir.path().join("emb.jsonl");
        let cfg = write_dataset(&ds, "toxicity", &records, Some(&emb)).unwrap();
        let loaded = load_dataset(&records, &cfg).unwrap();
        assert_eq!(loaded, ds);
    }

    #[test]
    fn loading_is_deterministic() {
        let f = write_lines(&[
            r#"{"id":"1","split":"train","label_proportions":{"toxicity":0.1},"group_proportions":{"b":0.2,"a":0.3}}"#,
            r#"{"id":"2","split":"validation","label_proportions":{"toxicity":0.0},"group_proportions":{"a":0.0}}"#,
        ]);
        let a = load_dataset(f.path(), &ingest("toxicity")).unwrap();
        let b = load_dataset(f.path(), &ingest("toxicity")).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
