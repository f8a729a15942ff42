//! Labeled corpora, few-shot splits, evaluation subsets and k-fold partitions.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// Binary class. Positive is the causal class everywhere in this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Positive, Label::Negative];

    /// Parses the accepted spellings: `1`/`0`, `causal`/`non-causal`,
    /// `true`/`false`, `positive`/`negative` (case-insensitive).
    pub fn parse(raw: &str) -> Option<Label> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "1" | "causal" | "true" | "positive" => Some(Label::Positive),
            "0" | "non-causal" | "false" | "negative" => Some(Label::Negative),
            _ => None,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Positive => Label::Negative,
            Label::Negative => Label::Positive,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub id: String,
    pub text: String,
    pub label: Label,
}

impl LabeledInstance {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Label) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            label,
        }
    }
}

/// Per-class instance counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub positive: usize,
    pub negative: usize,
}

impl ClassCounts {
    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Positive => self.positive,
            Label::Negative => self.negative,
        }
    }

    pub fn total(&self) -> usize {
        self.positive + self.negative
    }
}

/// An ordered, immutable collection of instances with unique ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCorpus {
    name: String,
    instances: Vec<LabeledInstance>,
}

impl LabeledCorpus {
    /// Validates ids and texts. Texts are trimmed.
    pub fn new(name: impl Into<String>, instances: Vec<LabeledInstance>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(instances.len());
        let mut cleaned = Vec::with_capacity(instances.len());
        for mut inst in instances {
            let trimmed = inst.text.trim();
            if trimmed.is_empty() {
                return Err(Error::EmptyText(inst.id));
            }
            if trimmed.len() != inst.text.len() {
                inst.text = trimmed.to_string();
            }
            if !seen.insert(inst.id.clone()) {
                return Err(Error::DuplicateId(inst.id));
            }
            cleaned.push(inst);
        }
        Ok(Self {
            name: name.into(),
            instances: cleaned,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn instances(&self) -> &[LabeledInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledInstance> {
        self.instances.iter()
    }

    pub fn counts(&self) -> ClassCounts {
        let mut counts = ClassCounts::default();
        for inst in &self.instances {
            match inst.label {
                Label::Positive => counts.positive += 1,
                Label::Negative => counts.negative += 1,
            }
        }
        counts
    }

    pub fn ids(&self) -> Vec<String> {
        self.instances.iter().map(|i| i.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&LabeledInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn of_class(&self, label: Label) -> impl Iterator<Item = &LabeledInstance> {
        self.instances.iter().filter(move |i| i.label == label)
    }

    /// Checksum of the instance contents, independent of file format.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for inst in &self.instances {
            for field in [inst.id.as_str(), inst.label.as_str(), inst.text.as_str()] {
                hasher.update((field.len() as u64).to_le_bytes());
                hasher.update(field.as_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Keeps instances at the given positions, in corpus order.
    fn select(&self, name: String, mut positions: Vec<usize>) -> LabeledCorpus {
        positions.sort_unstable();
        positions.dedup();
        LabeledCorpus {
            name,
            instances: positions.into_iter().map(|p| self.instances[p].clone()).collect(),
        }
    }

    /// Keeps the instances whose id is in `ids`, preserving corpus order.
    /// Fails if any id is unknown.
    pub fn restrict_to(&self, name: impl Into<String>, ids: &[String]) -> Result<LabeledCorpus> {
        let position: HashMap<&str, usize> = self
            .instances
            .iter()
            .enumerate()
            .map(|(p, i)| (i.id.as_str(), p))
            .collect();
        let mut positions = Vec::with_capacity(ids.len());
        for id in ids {
            match position.get(id.as_str()) {
                Some(&p) => positions.push(p),
                None => return Err(Error::Misaligned(format!("unknown instance id '{id}'"))),
            }
        }
        Ok(self.select(name.into(), positions))
    }

    /// Copy with every id prefixed, e.g. to keep two corpora's ids disjoint.
    pub fn with_id_prefix(&self, prefix: &str) -> LabeledCorpus {
        LabeledCorpus {
            name: self.name.clone(),
            instances: self
                .instances
                .iter()
                .map(|i| LabeledInstance::new(format!("{prefix}{}", i.id), i.text.clone(), i.label))
                .collect(),
        }
    }

    fn class_positions(&self, label: Label) -> Vec<usize> {
        self.instances
            .iter()
            .enumerate()
            .filter(|(_, i)| i.label == label)
            .map(|(p, _)| p)
            .collect()
    }
}

impl<'a> IntoIterator for &'a LabeledCorpus {
    type Item = &'a LabeledInstance;
    type IntoIter = std::slice::Iter<'a, LabeledInstance>;

    fn into_iter(self) -> Self::IntoIter {
        self.instances.iter()
    }
}

/// Maps file columns (or JSON keys) onto instance fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    /// When absent, ids are the zero-based data row index.
    pub id: Option<String>,
    pub text: String,
    pub label: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            id: None,
            text: "text".into(),
            label: "label".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FileFormat {
    Delimited(u8),
    JsonLines,
}

fn detect_format(path: &Path) -> FileFormat {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("tsv") | Some("tab") => FileFormat::Delimited(b'\t'),
        Some("jsonl") | Some("ndjson") => FileFormat::JsonLines,
        _ => FileFormat::Delimited(b','),
    }
}

struct RawRow {
    id: String,
    text: Option<String>,
    label: String,
}

fn read_rows(path: &Path, schema: &ColumnSchema, need_text: bool) -> Result<Vec<RawRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match detect_format(path) {
        FileFormat::Delimited(delimiter) => {
            let mut reader = csv::ReaderBuilder::new()
                .delimiter(delimiter)
                .has_headers(true)
                .flexible(false)
                .from_reader(file);
            let headers = match reader.headers() {
                Ok(h) => h.clone(),
                // an empty file has no header row at all
                Err(_) => return Ok(Vec::new()),
            };
            if headers.iter().all(|h| h.trim().is_empty()) {
                return Ok(Vec::new());
            }
            let column = |name: &str| -> Result<usize> {
                headers
                    .iter()
                    .position(|h| h.trim() == name)
                    .ok_or_else(|| Error::MissingColumn(name.to_string()))
            };
            let text_col = if need_text {
                Some(column(&schema.text)?)
            } else {
                column(&schema.text).ok()
            };
            let label_col = column(&schema.label)?;
            let id_col = schema.id.as_deref().map(column).transpose()?;
            let mut rows = Vec::new();
            for (row, record) in reader.records().enumerate() {
                let record = record.map_err(|e| Error::parse(path, e.to_string()))?;
                let field = |c: usize| record.get(c).unwrap_or("").to_string();
                rows.push(RawRow {
                    id: id_col.map(field).unwrap_or_else(|| row.to_string()),
                    text: text_col.map(field),
                    label: field(label_col),
                });
            }
            Ok(rows)
        }
        FileFormat::JsonLines => {
            let mut rows = Vec::new();
            for (line_no, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let value: serde_json::Value = serde_json::from_str(&line)
                    .map_err(|e| Error::parse(path, format!("line {}: {e}", line_no + 1)))?;
                let get = |key: &str| -> Option<String> {
                    value.get(key).map(|v| match v {
                        serde_json::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                };
                let row = rows.len();
                let text = get(&schema.text);
                if need_text && text.is_none() {
                    return Err(Error::MissingColumn(schema.text.clone()));
                }
                rows.push(RawRow {
                    id: match &schema.id {
                        Some(key) => get(key).ok_or_else(|| Error::MissingColumn(key.clone()))?,
                        None => row.to_string(),
                    },
                    text,
                    label: get(&schema.label).ok_or_else(|| Error::MissingColumn(schema.label.clone()))?,
                });
            }
            Ok(rows)
        }
    }
}

/// Loads a corpus from a `.csv`, `.tsv` or `.jsonl` file, preserving file order.
pub fn load_corpus(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<LabeledCorpus> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("corpus")
        .to_string();
    let rows = read_rows(path, schema, true)?;
    if rows.is_empty() {
        return Err(Error::EmptyCorpus(name));
    }
    let mut instances = Vec::with_capacity(rows.len());
    for (row, raw) in rows.into_iter().enumerate() {
        let label = Label::parse(&raw.label).ok_or(Error::UnmappedLabel {
            value: raw.label.clone(),
            row,
        })?;
        instances.push(LabeledInstance {
            id: raw.id,
            text: raw.text.unwrap_or_default(),
            label,
        });
    }
    LabeledCorpus::new(name, instances)
}

/// Loads `(id, label)` pairs. The text column is optional here.
pub fn load_gold_labels(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<Vec<(String, Label)>> {
    let path = path.as_ref();
    let rows = read_rows(path, schema, false)?;
    if rows.is_empty() {
        return Err(Error::EmptyCorpus(path.display().to_string()));
    }
    let mut seen = HashSet::new();
    let mut gold = Vec::with_capacity(rows.len());
    for (row, raw) in rows.into_iter().enumerate() {
        let label = Label::parse(&raw.label).ok_or(Error::UnmappedLabel {
            value: raw.label.clone(),
            row,
        })?;
        if !seen.insert(raw.id.clone()) {
            return Err(Error::DuplicateId(raw.id));
        }
        gold.push((raw.id, label));
    }
    Ok(gold)
}

/// Writes the corpus as one JSON record per line.
pub fn write_corpus_jsonl(corpus: &LabeledCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for inst in corpus {
        out.push_str(&serde_json::to_string(inst)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// The k-per-class training set and the remaining evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSplit {
    pub train: LabeledCorpus,
    pub eval: LabeledCorpus,
    pub k: usize,
    pub seed: u64,
}

fn sample_per_class(corpus: &LabeledCorpus, per_class: usize, seed: u64, stream: &str) -> Result<Vec<usize>> {
    let mut chosen = Vec::with_capacity(2 * per_class);
    for label in Label::ALL {
        let positions = corpus.class_positions(label);
        if positions.len() < per_class {
            return Err(Error::InsufficientClass {
                class: label,
                requested: per_class,
                available: positions.len(),
            });
        }
        let mut rng = rng::stream(seed, &[stream, label.as_str()]);
        let picked = index::sample(&mut rng, positions.len(), per_class);
        chosen.extend(picked.into_iter().map(|i| positions[i]));
    }
    Ok(chosen)
}

/// Samples `k` instances per class into the training set; the rest is the
/// evaluation set. Both keep corpus order.
pub fn make_fewshot_split(corpus: &LabeledCorpus, k: usize, seed: u64) -> Result<FewShotSplit> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let train_positions = sample_per_class(corpus, k, seed, "fewshot-split")?;
    let taken: HashSet<usize> = train_positions.iter().copied().collect();
    let eval_positions = (0..corpus.len()).filter(|p| !taken.contains(p)).collect();
    Ok(FewShotSplit {
        train: corpus.select(format!("{}-train-k{k}", corpus.name()), train_positions),
        eval: corpus.select(format!("{}-eval-k{k}", corpus.name()), eval_positions),
        k,
        seed,
    })
}

/// Samples `m` positives and `m` negatives without replacement.
pub fn sample_eval_subset(eval: &LabeledCorpus, m: usize, seed: u64) -> Result<LabeledCorpus> {
    if m == 0 {
        return Err(Error::InvalidArgument("subset size must be positive".into()));
    }
    let positions = sample_per_class(eval, m, seed, "eval-subset")?;
    Ok(eval.select(format!("{}-subset-m{m}", eval.name()), positions))
}

/// Class-stratified k-fold partition. Returns `(train, dev)` pairs.
///
/// Within each class the instances are shuffled and dealt round-robin; the
/// fold cursor carries over between classes so dev sizes differ by at most one.
pub fn make_kfold(corpus: &LabeledCorpus, folds: usize, seed: u64) -> Result<Vec<(LabeledCorpus, LabeledCorpus)>> {
    if folds < 2 || folds > corpus.len() {
        return Err(Error::InvalidArgument(format!(
            "folds must be in 2..={}, got {folds}",
            corpus.len()
        )));
    }
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); folds];
    let mut cursor = 0usize;
    for label in Label::ALL {
        let positions = corpus.class_positions(label);
        let mut rng = rng::stream(seed, &["kfold", label.as_str()]);
        let order = index::sample(&mut rng, positions.len(), positions.len());
        for i in order {
            assignment[cursor % folds].push(positions[i]);
            cursor += 1;
        }
    }
    Ok(assignment
        .into_iter()
        .enumerate()
        .map(|(f, dev_positions)| {
            let dev_set: HashSet<usize> = dev_positions.iter().copied().collect();
            let train_positions = (0..corpus.len()).filter(|p| !dev_set.contains(p)).collect();
            (
                corpus.select(format!("{}-fold{f}-train", corpus.name()), train_positions),
                corpus.select(format!("{}-fold{f}-dev", corpus.name()), dev_positions),
            )
        })
        .collect())
}

/// Auditable record of a few-shot split that can be re-applied to its source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub source: String,
    pub source_checksum: String,
    pub rng: String,
    pub k: usize,
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub eval_ids: Vec<String>,
}

impl SplitManifest {
    pub fn from_split(source: &LabeledCorpus, split: &FewShotSplit) -> Self {
        Self {
            source: source.name().to_string(),
            source_checksum: source.checksum(),
            rng: rng::RNG_ID.to_string(),
            k: split.k,
            seed: split.seed,
            train_ids: split.train.ids(),
            eval_ids: split.eval.ids(),
        }
    }

    /// Rebuilds the split from the recorded ids. The source checksum must match.
    pub fn apply(&self, source: &LabeledCorpus) -> Result<FewShotSplit> {
        if source.checksum() != self.source_checksum {
            return Err(Error::Misaligned(format!(
                "corpus checksum {} does not match manifest {}",
                source.checksum(),
                self.source_checksum
            )));
        }
        let train_set: BTreeSet<&String> = self.train_ids.iter().collect();
        if self.eval_ids.iter().any(|id| train_set.contains(id))
            || train_set.len() + self.eval_ids.len() != source.len()
        {
            return Err(Error::Misaligned(
                "manifest train/eval ids do not partition the corpus".into(),
            ));
        }
        Ok(FewShotSplit {
            train: source.restrict_to(format!("{}-train-k{}", source.name(), self.k), &self.train_ids)?,
            eval: source.restrict_to(format!("{}-eval-k{}", source.name(), self.k), &self.eval_ids)?,
            k: self.k,
            seed: self.seed,
        })
    }
}

/// Builds a corpus with the given class counts and placeholder sentences.
/// Useful for arithmetic checks on split sizes.
pub fn synthetic_corpus(name: &str, positives: usize, negatives: usize) -> LabeledCorpus {
    let mut instances = Vec::with_capacity(positives + negatives);
    for i in 0..positives {
        instances.push(LabeledInstance::new(
            format!("p{i}"),
            format!("event {i} caused outcome {i}"),
            Label::Positive,
        ));
    }
    for i in 0..negatives {
        instances.push(LabeledInstance::new(
            format!("n{i}"),
            format!("event {i} happened on day {i}"),
            Label::Negative,
        ));
    }
    LabeledCorpus::new(name, instances).expect("synthetic ids are unique")
}
