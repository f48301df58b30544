//! Canonical benchmark records: loading, validation, adaptation from source
//! layouts, and balanced sampling.
//!
//! The canonical file is UTF-8 JSON Lines with the fixed fields `id`,
//! `image_ref`, `question`, `gold`, `dataset`, `split`, `subtask` and `mode`.
//! A sidecar `<file>.manifest.json` records counts and checksums.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::labels::GoldLabel;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}:{line}: {message}")]
    Line {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: duplicate id {id:?} on lines {first} and {second}")]
    DuplicateId {
        path: PathBuf,
        id: String,
        first: usize,
        second: usize,
    },
    #[error("dataset {dataset:?}: field {field} must be set on every item or on none")]
    InconsistentTags {
        dataset: String,
        field: &'static str,
    },
    #[error(
        "not enough items for {needed} per class (available: yes {yes_available}, no {no_available})"
    )]
    InsufficientClass {
        needed: usize,
        yes_available: usize,
        no_available: usize,
    },
    #[error("adaptation aborted: {rejected} of {total} records rejected (max error rate {max_error_rate}); first: {first}")]
    AdaptAborted {
        rejected: usize,
        total: usize,
        max_error_rate: f64,
        first: String,
    },
    #[error("invalid mapping spec {path}: {message}")]
    MappingSpec { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One benchmark question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub image_ref: String,
    pub question: String,
    pub gold: GoldLabel,
    pub dataset: String,
    pub split: String,
    pub subtask: Option<String>,
    pub mode: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawItem {
    id: String,
    image_ref: String,
    question: String,
    gold: String,
    dataset: String,
    split: String,
    #[serde(default)]
    subtask: Option<String>,
    #[serde(default)]
    mode: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub yes: usize,
    pub no: usize,
}

impl ClassCounts {
    pub fn of<'a>(items: impl IntoIterator<Item = &'a EvalItem>) -> Self {
        let mut counts = Self::default();
        for item in items {
            match item.gold {
                GoldLabel::Yes => counts.yes += 1,
                GoldLabel::No => counts.no += 1,
            }
        }
        counts
    }

    pub fn total(&self) -> usize {
        self.yes + self.no
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub datasets: Vec<String>,
    pub splits: Vec<String>,
    pub item_count: usize,
    pub class_counts: ClassCounts,
    /// File name → hex SHA-256 of the file bytes.
    pub source_checksums: BTreeMap<String, String>,
    /// Image reference → hex SHA-256, for images that were readable.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub image_hashes: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn describe(items: &[EvalItem], source_checksums: BTreeMap<String, String>) -> Self {
        let datasets: BTreeSet<_> = items.iter().map(|i| i.dataset.clone()).collect();
        let splits: BTreeSet<_> = items.iter().map(|i| i.split.clone()).collect();
        Self {
            datasets: datasets.into_iter().collect(),
            splits: splits.into_iter().collect(),
            item_count: items.len(),
            class_counts: ClassCounts::of(items),
            source_checksums,
            image_hashes: BTreeMap::new(),
        }
    }

    /// Records content hashes of every image that can be read under `root`.
    pub fn hash_images(&mut self, items: &[EvalItem], root: &Path) {
        for item in items {
            if let Ok(bytes) = fs::read(root.join(&item.image_ref)) {
                self.image_hashes
                    .insert(item.image_ref.clone(), sha256_hex(&bytes));
            }
        }
    }

    /// Combined checksum over all source files, order-independent.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, sum) in &self.source_checksums {
            hasher.update(name.as_bytes());
            hasher.update([0]);
            hasher.update(sum.as_bytes());
            hasher.update([0]);
        }
        hex::encode(hasher.finalize())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn manifest_path(canonical: &Path) -> PathBuf {
    let mut name = canonical.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Reads and validates a canonical record file.
pub fn load_canonical(path: &Path) -> Result<(Vec<EvalItem>, DatasetManifest), DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| DatasetError::Line {
        path: path.to_path_buf(),
        line: 0,
        message: format!("not UTF-8: {e}"),
    })?;

    let mut items = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (index, line) in text.lines().enumerate() {
        let line_no = index + 1;
        if line.trim().is_empty() {
            continue;
        }
        let line_err = |message: String| DatasetError::Line {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let raw: RawItem = serde_json::from_str(line).map_err(|e| line_err(e.to_string()))?;
        let gold: GoldLabel = raw.gold.parse().map_err(line_err)?;
        if raw.id.is_empty() {
            return Err(line_err("empty id".into()));
        }
        if let Some(first) = seen.insert(raw.id.clone(), line_no) {
            return Err(DatasetError::DuplicateId {
                path: path.to_path_buf(),
                id: raw.id,
                first,
                second: line_no,
            });
        }
        items.push(EvalItem {
            id: raw.id,
            image_ref: raw.image_ref,
            question: raw.question,
            gold,
            dataset: raw.dataset,
            split: raw.split,
            subtask: raw.subtask,
            mode: raw.mode,
        });
    }
    check_tag_consistency(&items)?;

    let checksums = BTreeMap::from([(file_name(path), sha256_hex(&bytes))]);
    let manifest = DatasetManifest::describe(&items, checksums);
    Ok((items, manifest))
}

fn check_tag_consistency(items: &[EvalItem]) -> Result<(), DatasetError> {
    let mut by_dataset: BTreeMap<&str, (BTreeSet<bool>, BTreeSet<bool>)> = BTreeMap::new();
    for item in items {
        let entry = by_dataset.entry(&item.dataset).or_default();
        entry.0.insert(item.subtask.is_some());
        entry.1.insert(item.mode.is_some());
    }
    for (dataset, (subtask, mode)) in by_dataset {
        if subtask.len() > 1 {
            return Err(DatasetError::InconsistentTags {
                dataset: dataset.to_string(),
                field: "subtask",
            });
        }
        if mode.len() > 1 {
            return Err(DatasetError::InconsistentTags {
                dataset: dataset.to_string(),
                field: "mode",
            });
        }
    }
    Ok(())
}

/// Writes items as a canonical file plus its manifest sidecar.
pub fn write_canonical(path: &Path, items: &[EvalItem]) -> Result<DatasetManifest, DatasetError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("EvalItem serializes");
        buf.push(b'\n');
    }
    fs::write(path, &buf).map_err(io_err(path))?;
    let checksums = BTreeMap::from([(file_name(path), sha256_hex(&buf))]);
    let manifest = DatasetManifest::describe(items, checksums);
    write_manifest(path, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(canonical: &Path, manifest: &DatasetManifest) -> Result<(), DatasetError> {
    let sidecar = manifest_path(canonical);
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&sidecar, text).map_err(io_err(&sidecar))
}

/// Number of items requested per gold class plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleSpec {
    pub n_per_class: usize,
    pub seed: u64,
}

/// Draws exactly `n_per_class` yes-items and no-items.
///
/// Per class, ids are sorted, shuffled with Fisher-Yates driven by
/// ChaCha20 seeded from `seed` (the yes class is shuffled first, then the no
/// class, from the same stream), and the first `n_per_class` kept. The
/// output alternates yes, no, yes, no, ...
pub fn balanced_sample(
    items: &[EvalItem],
    n_per_class: usize,
    seed: u64,
) -> Result<Vec<EvalItem>, DatasetError> {
    let mut yes: Vec<&EvalItem> = items.iter().filter(|i| i.gold == GoldLabel::Yes).collect();
    let mut no: Vec<&EvalItem> = items.iter().filter(|i| i.gold == GoldLabel::No).collect();
    if yes.len() < n_per_class || no.len() < n_per_class {
        return Err(DatasetError::InsufficientClass {
            needed: n_per_class,
            yes_available: yes.len(),
            no_available: no.len(),
        });
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for class in [&mut yes, &mut no] {
        class.sort_by(|a, b| a.id.cmp(&b.id));
        fisher_yates(class, &mut rng);
        class.truncate(n_per_class);
    }

    Ok(yes
        .into_iter()
        .zip(no)
        .flat_map(|(y, n)| [y.clone(), n.clone()])
        .collect())
}

fn fisher_yates<T>(slice: &mut [T], rng: &mut impl RngCore) {
    for i in (1..slice.len()).rev() {
        let j = bounded_index(rng, i as u64 + 1) as usize;
        slice.swap(i, j);
    }
}

/// Uniform integer in `0..bound` by rejection sampling on 64-bit draws.
fn bounded_index(rng: &mut impl RngCore, bound: u64) -> u64 {
    let threshold = bound.wrapping_neg() % bound;
    loop {
        let x = rng.next_u64();
        if x >= threshold {
            return x % bound;
        }
    }
}

/// Where a canonical field comes from in a source record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSource {
    /// Dotted path into the source object, e.g. `meta.label`.
    Field {
        field: String,
    },
    Value {
        value: String,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    #[default]
    Jsonl,
    /// A single top-level JSON array of objects.
    Json,
}

/// Declarative mapping from a benchmark's native layout to canonical records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingSpec {
    #[serde(default)]
    pub format: SourceFormat,
    /// Without an id source, ids are `<dataset>-<split>-<record index>`.
    #[serde(default)]
    pub id: Option<FieldSource>,
    pub question: FieldSource,
    pub image: FieldSource,
    #[serde(default)]
    pub image_prefix: String,
    pub gold: FieldSource,
    /// Source gold value → label. Defaults to `yes → yes`, `no → no`.
    #[serde(default)]
    pub gold_map: BTreeMap<String, GoldLabel>,
    pub dataset: FieldSource,
    pub split: FieldSource,
    #[serde(default)]
    pub subtask: Option<FieldSource>,
    #[serde(default)]
    pub mode: Option<FieldSource>,
    #[serde(default)]
    pub max_error_rate: f64,
}

impl MappingSpec {
    /// Reads a spec from TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let spec_err = |message: String| DatasetError::MappingSpec {
            path: path.to_path_buf(),
            message,
        };
        let spec: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| spec_err(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| spec_err(e.to_string()))?
        };
        if !(0.0..=1.0).contains(&spec.max_error_rate) {
            return Err(spec_err("max_error_rate must be in [0, 1]".into()));
        }
        Ok(spec)
    }

    fn gold_label(&self, value: &str) -> Option<GoldLabel> {
        if self.gold_map.is_empty() {
            value.parse().ok()
        } else {
            self.gold_map.get(value).copied()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordError {
    /// 1-based record position in the source.
    pub record: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptReport {
    pub total: usize,
    pub written: usize,
    pub rejected: Vec<RecordError>,
    pub manifest: DatasetManifest,
}

fn lookup<'a>(record: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(record, |v, key| v.get(key))
}

fn scalar_string(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn resolve(record: &Value, source: &FieldSource) -> Result<String, String> {
    match source {
        FieldSource::Value { value } => Ok(value.clone()),
        FieldSource::Field { field } => match lookup(record, field) {
            None | Some(Value::Null) => Err(format!("missing field {field:?}")),
            Some(v) => scalar_string(v).ok_or_else(|| format!("field {field:?} is not a scalar")),
        },
    }
}

fn map_record(record: &Value, index: usize, spec: &MappingSpec) -> Result<EvalItem, String> {
    let dataset = resolve(record, &spec.dataset)?;
    let split = resolve(record, &spec.split)?;
    let id = match &spec.id {
        Some(source) => resolve(record, source)?,
        None => format!("{dataset}-{split}-{index}"),
    };
    let raw_gold = resolve(record, &spec.gold)?;
    let gold = spec
        .gold_label(&raw_gold)
        .ok_or_else(|| format!("unmapped gold value {raw_gold:?}"))?;
    let optional =
        |source: &Option<FieldSource>| source.as_ref().map(|s| resolve(record, s)).transpose();
    Ok(EvalItem {
        id,
        image_ref: format!("{}{}", spec.image_prefix, resolve(record, &spec.image)?),
        question: resolve(record, &spec.question)?,
        gold,
        dataset,
        split,
        subtask: optional(&spec.subtask)?,
        mode: optional(&spec.mode)?,
    })
}

fn read_source(
    path: &Path,
    format: SourceFormat,
) -> Result<Vec<Result<Value, String>>, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    match format {
        SourceFormat::Jsonl => {
            let mut records = Vec::new();
            for line in BufReader::new(file).lines() {
                let line = line.map_err(io_err(path))?;
                if line.trim().is_empty() {
                    continue;
                }
                records.push(serde_json::from_str(&line).map_err(|e| e.to_string()));
            }
            Ok(records)
        }
        SourceFormat::Json => {
            let value: Value =
                serde_json::from_reader(BufReader::new(file)).map_err(|e| DatasetError::Line {
                    path: path.to_path_buf(),
                    line: e.line(),
                    message: e.to_string(),
                })?;
            match value {
                Value::Array(records) => Ok(records.into_iter().map(Ok).collect()),
                _ => Err(DatasetError::Line {
                    path: path.to_path_buf(),
                    line: 1,
                    message: "expected a top-level array".into(),
                }),
            }
        }
    }
}

/// Converts a source file into a canonical file at `out`.
///
/// Records that cannot be mapped are rejected; the run aborts without
/// writing when the rejected fraction exceeds the spec's `max_error_rate`.
pub fn adapt(source: &Path, spec: &MappingSpec, out: &Path) -> Result<AdaptReport, DatasetError> {
    let records = read_source(source, spec.format)?;
    let total = records.len();
    let mut items = Vec::with_capacity(total);
    let mut rejected = Vec::new();
    let mut seen = BTreeSet::new();

    for (index, record) in records.into_iter().enumerate() {
        let position = index + 1;
        let mapped = record
            .and_then(|r| map_record(&r, index, spec))
            .and_then(|item| {
                if seen.insert(item.id.clone()) {
                    Ok(item)
                } else {
                    Err(format!("duplicate id {:?}", item.id))
                }
            });
        match mapped {
            Ok(item) => items.push(item),
            Err(message) => rejected.push(RecordError {
                record: position,
                message,
            }),
        }
    }

    let rate = if total == 0 {
        0.0
    } else {
        rejected.len() as f64 / total as f64
    };
    if rate > spec.max_error_rate {
        let first = rejected
            .first()
            .map(|e| format!("record {}: {}", e.record, e.message))
            .unwrap_or_default();
        return Err(DatasetError::AdaptAborted {
            rejected: rejected.len(),
            total,
            max_error_rate: spec.max_error_rate,
            first,
        });
    }
    check_tag_consistency(&items)?;

    let manifest = write_canonical(out, &items)?;
    Ok(AdaptReport {
        total,
        written: items.len(),
        rejected,
        manifest,
    })
}
