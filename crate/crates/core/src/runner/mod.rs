//! Evaluation runs: select items, render prompts, dispatch trials, normalize
//! answers and score each group.
//!
//! Groups follow the hierarchy dataset → split → mode → subtask. For each
//! (dataset, split, mode) an aggregate report is produced; when that slice has
//! sub-tasks it is the field-wise mean of the sub-task reports.
//!
//! A run writes `config.json`, `records.jsonl` and `result.json` under
//! `<output_dir>/<run_id>/`, where the run id hashes everything that
//! determines the outcome. `result.json` holds no timings or cache flags, so
//! re-running a completed run with its cache reproduces it byte for byte.

mod config;
mod normalize;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{BackendKind, ItemFilter, RunConfig, RunConfigFile};
pub use normalize::{normalize_answer, RULESET_VERSION};

use crate::client::{
    media_type_for, Backend, ClientError, ClientStats, ModelClient, OpenAiBackend, ReplayBackend,
    ResponseCache, TrialRequest,
};
use crate::dataset::{self, DatasetError, EvalItem, SampleSpec};
use crate::labels::{GoldLabel, Prediction};
use crate::metrics::{
    aggregate_subtasks, compute_metrics, ConfusionMatrix, ImprovementDelta, MetricsError,
    MetricsReport,
};
use crate::prompts::{self, PromptError, TemplateSet};

/// How benchmark questions reach the template: the whole question text,
/// including any misleading preamble, fills the placeholder.
pub const QUESTION_PLACEMENT: &str = "full-question-in-placeholder";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no items selected")]
    NoItems,
    #[error("runs are not comparable: {0}")]
    Incomparable(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Failed,
}

/// One (item, template, model) trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub item_id: String,
    pub dataset: String,
    pub split: String,
    pub subtask: Option<String>,
    pub mode: Option<String>,
    pub gold: GoldLabel,
    pub prompt: String,
    pub status: TrialStatus,
    pub raw_response: Option<String>,
    pub normalized: Option<Prediction>,
    pub error: Option<String>,
    pub latency_ms: u64,
    pub cache_hit: bool,
    pub attempts: u32,
}

impl RunRecord {
    pub fn group_key(&self) -> GroupKey {
        GroupKey {
            dataset: self.dataset.clone(),
            split: self.split.clone(),
            mode: self.mode.clone(),
            subtask: self.subtask.clone(),
        }
    }
}

/// dataset → split → mode → subtask.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub dataset: String,
    pub split: String,
    pub mode: Option<String>,
    pub subtask: Option<String>,
}

impl GroupKey {
    pub fn slice(&self) -> SliceKey {
        SliceKey {
            dataset: self.dataset.clone(),
            split: self.split.clone(),
            mode: self.mode.clone(),
        }
    }
}

/// dataset → split → mode; the level at which sub-tasks are averaged.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SliceKey {
    pub dataset: String,
    pub split: String,
    pub mode: Option<String>,
}

impl SliceKey {
    /// `dataset/split` or `dataset/split/mode`.
    pub fn label(&self) -> String {
        match &self.mode {
            Some(mode) => format!("{}/{}/{mode}", self.dataset, self.split),
            None => format!("{}/{}", self.dataset, self.split),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub key: GroupKey,
    pub confusion: ConfusionMatrix,
    /// Absent when every trial of the group failed.
    pub metrics: Option<MetricsReport>,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub key: SliceKey,
    /// Sub-tasks averaged into `metrics`; empty when the slice has none.
    pub subtasks: Vec<String>,
    pub metrics: MetricsReport,
}

/// Settings that determine a run's outcome; hashed into the run id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunIdentity {
    pub dataset_checksum: String,
    pub filter: ItemFilter,
    pub template_id: String,
    pub template_sha256: String,
    pub backend: BackendKind,
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub sample: Option<SampleSpec>,
    pub ruleset_version: String,
    pub question_placement: String,
}

impl RunIdentity {
    pub fn run_id(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("identity serializes");
        hex::encode(Sha256::digest(bytes))[..16].to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub identity: RunIdentity,
    /// Sorted ids of every selected item.
    pub item_ids: Vec<String>,
    pub trial_count: usize,
    pub failed_count: usize,
    pub unresolved_count: usize,
    /// False when any trial failed; such a result must not be compared as
    /// final.
    pub is_final: bool,
    pub groups: Vec<GroupResult>,
    pub aggregates: Vec<AggregateResult>,
}

impl RunResult {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| RunError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn aggregate(&self, key: &SliceKey) -> Option<&AggregateResult> {
        self.aggregates.iter().find(|a| &a.key == key)
    }
}

/// Scores a set of records. Failed trials are excluded from the metrics and
/// counted separately.
pub fn summarize(identity: RunIdentity, records: &[RunRecord]) -> Result<RunResult, RunError> {
    let mut groups: BTreeMap<GroupKey, (ConfusionMatrix, usize)> = BTreeMap::new();
    for record in records {
        let entry = groups.entry(record.group_key()).or_default();
        match (record.status, record.normalized) {
            (TrialStatus::Ok, Some(prediction)) => entry.0.record(record.gold, prediction),
            _ => entry.1 += 1,
        }
    }

    let groups = groups
        .into_iter()
        .map(|(key, (confusion, failed))| {
            let metrics = (confusion.total() > 0)
                .then(|| compute_metrics(&confusion))
                .transpose()?;
            Ok(GroupResult {
                key,
                confusion,
                metrics,
                failed,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;

    let mut slices: BTreeMap<SliceKey, BTreeMap<Option<String>, MetricsReport>> = BTreeMap::new();
    for group in &groups {
        if let Some(metrics) = group.metrics {
            slices
                .entry(group.key.slice())
                .or_default()
                .insert(group.key.subtask.clone(), metrics);
        }
    }
    let aggregates = slices
        .into_iter()
        .map(|(key, by_subtask)| {
            let subtasks: BTreeMap<String, MetricsReport> = by_subtask
                .iter()
                .filter_map(|(k, v)| k.clone().map(|k| (k, *v)))
                .collect();
            let metrics = if subtasks.is_empty() {
                by_subtask[&None]
            } else {
                aggregate_subtasks(&subtasks)?
            };
            Ok(AggregateResult {
                key,
                subtasks: subtasks.into_keys().collect(),
                metrics,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;

    let failed_count = records
        .iter()
        .filter(|r| r.status == TrialStatus::Failed)
        .count();
    let mut item_ids: Vec<String> = records.iter().map(|r| r.item_id.clone()).collect();
    item_ids.sort();

    Ok(RunResult {
        run_id: identity.run_id(),
        identity,
        item_ids,
        trial_count: records.len(),
        failed_count,
        unresolved_count: records
            .iter()
            .filter(|r| r.normalized == Some(Prediction::Unresolved))
            .count(),
        is_final: failed_count == 0,
        groups,
        aggregates,
    })
}

/// What a finished run produced, plus in-memory statistics that are not
/// persisted.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub result: RunResult,
    pub records: Vec<RunRecord>,
    pub run_dir: PathBuf,
    pub stats: ClientStats,
    pub backend: String,
}

/// Loads the dataset and applies the filter and optional balanced sample.
pub fn select_items(config: &RunConfig) -> Result<(Vec<EvalItem>, String), RunError> {
    let (items, manifest) = dataset::load_canonical(&config.dataset)?;
    let filtered: Vec<EvalItem> = items
        .into_iter()
        .filter(|i| config.filter.accepts(i))
        .collect();
    let selected = match config.sample {
        Some(spec) => dataset::balanced_sample(&filtered, spec.n_per_class, spec.seed)?,
        None => filtered,
    };
    if selected.is_empty() {
        return Err(RunError::NoItems);
    }
    Ok((selected, manifest.checksum()))
}

fn load_templates(config: &RunConfig) -> Result<TemplateSet, RunError> {
    let mut templates = TemplateSet::builtin();
    if let Some(dir) = &config.templates_dir {
        templates.extend(TemplateSet::load_dir(dir)?)?;
    }
    Ok(templates)
}

/// Builds the client described by `config`: backend, cache and concurrency
/// bound.
pub fn build_client(config: &RunConfig) -> Result<ModelClient, RunError> {
    let backend: Arc<dyn Backend> = match config.backend {
        BackendKind::Replay => {
            let fixture = config
                .replay_fixture
                .as_deref()
                .ok_or_else(|| RunError::Config("replay backend needs replay_fixture".into()))?;
            Arc::new(ReplayBackend::load(fixture)?)
        }
        BackendKind::Openai => Arc::new(OpenAiBackend::new(&config.endpoint)?),
    };
    let cache = Arc::new(ResponseCache::open(&config.cache_path())?);
    Ok(ModelClient::new(backend)
        .with_cache(cache)
        .with_max_in_flight(config.concurrency))
}

pub async fn run_eval(config: &RunConfig) -> Result<RunOutcome, RunError> {
    config.validate()?;
    let client = build_client(config)?;
    run_eval_with_client(config, &client).await
}

/// Runs with a caller-supplied client; the config's backend and cache
/// settings are ignored apart from the backend kind recorded in the run id.
pub async fn run_eval_with_client(
    config: &RunConfig,
    client: &ModelClient,
) -> Result<RunOutcome, RunError> {
    let (items, dataset_checksum) = select_items(config)?;
    let templates = load_templates(config)?;
    let template = templates.get(&config.template)?;

    let identity = RunIdentity {
        dataset_checksum,
        filter: config.filter.clone(),
        template_id: template.id.clone(),
        template_sha256: template.body_sha256(),
        backend: config.backend,
        base_url: config.endpoint.base_url.clone(),
        model: config.endpoint.model.clone(),
        temperature: config.endpoint.temperature,
        max_tokens: config.endpoint.max_tokens,
        sample: config.sample,
        ruleset_version: RULESET_VERSION.to_string(),
        question_placement: QUESTION_PLACEMENT.to_string(),
    };
    let image_root = config.image_root();
    let stats_before = client.stats();

    let mut indexed: Vec<(usize, RunRecord)> = stream::iter(items.iter().enumerate())
        .map(|(index, item)| {
            let image_root = &image_root;
            async move {
                let record = run_trial(item, template, config, client, image_root).await;
                (index, record)
            }
        })
        .buffer_unordered(config.concurrency)
        .collect()
        .await;
    indexed.sort_by_key(|(index, _)| *index);
    let records: Vec<RunRecord> = indexed.into_iter().map(|(_, r)| r).collect();

    let result = summarize(identity, &records)?;
    let run_dir = config.output_dir.join(&result.run_id);
    persist(&run_dir, config, &records, &result)?;

    let after = client.stats();
    Ok(RunOutcome {
        result,
        records,
        run_dir,
        stats: ClientStats {
            backend_calls: after.backend_calls - stats_before.backend_calls,
            cache_hits: after.cache_hits - stats_before.cache_hits,
        },
        backend: client.backend_name().to_string(),
    })
}

async fn run_trial(
    item: &EvalItem,
    template: &prompts::PromptTemplate,
    config: &RunConfig,
    client: &ModelClient,
    image_root: &Path,
) -> RunRecord {
    let mut record = RunRecord {
        item_id: item.id.clone(),
        dataset: item.dataset.clone(),
        split: item.split.clone(),
        subtask: item.subtask.clone(),
        mode: item.mode.clone(),
        gold: item.gold,
        prompt: String::new(),
        status: TrialStatus::Failed,
        raw_response: None,
        normalized: None,
        error: None,
        latency_ms: 0,
        cache_hit: false,
        attempts: 0,
    };

    let rendered = match prompts::render(template, &item.question) {
        Ok(r) => r,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    record.prompt = rendered.text;

    let image_path = image_root.join(&item.image_ref);
    let image = match tokio::fs::read(&image_path).await {
        Ok(bytes) => bytes,
        Err(e) => {
            record.error = Some(format!("image {}: {e}", image_path.display()));
            return record;
        }
    };
    let request = match TrialRequest::new(
        image,
        media_type_for(&item.image_ref),
        record.prompt.clone(),
        config.endpoint.clone(),
    ) {
        Ok(r) => r,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };

    match client.complete(&request).await {
        Ok(response) => {
            record.normalized = Some(normalize_answer(&response.raw_text));
            record.raw_response = Some(response.raw_text);
            record.status = TrialStatus::Ok;
            record.latency_ms = response.latency_ms;
            record.cache_hit = response.cache_hit;
            record.attempts = response.attempts;
        }
        Err(e) => {
            record.attempts = e.attempt_log().len() as u32;
            record.error = Some(e.to_string());
            tracing::warn!(item = %item.id, error = %e, "trial failed");
        }
    }
    record
}

fn persist(
    run_dir: &Path,
    config: &RunConfig,
    records: &[RunRecord],
    result: &RunResult,
) -> Result<(), RunError> {
    std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;

    let config_path = run_dir.join("config.json");
    let snapshot = serde_json::json!({ "config": config, "identity": result.identity });
    write_json(&config_path, &snapshot)?;

    let records_path = run_dir.join("records.jsonl");
    let mut buf = Vec::new();
    for record in records {
        serde_json::to_writer(&mut buf, record).expect("record serializes");
        buf.push(b'\n');
    }
    std::fs::write(&records_path, buf).map_err(io_err(&records_path))?;

    write_json(&run_dir.join("result.json"), result)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn load_records(path: &Path) -> Result<Vec<RunRecord>, RunError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| RunError::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow<K> {
    pub key: K,
    pub baseline: MetricsReport,
    pub treated: MetricsReport,
    /// Absent when the baseline macro F1 is zero.
    pub delta: Option<ImprovementDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline_run: String,
    pub treated_run: String,
    pub baseline_template: String,
    pub treated_template: String,
    pub aggregates: Vec<ComparisonRow<SliceKey>>,
    pub groups: Vec<ComparisonRow<GroupKey>>,
}

fn compare_row<K: Clone>(
    key: &K,
    baseline: MetricsReport,
    treated: MetricsReport,
) -> ComparisonRow<K> {
    ComparisonRow {
        key: key.clone(),
        baseline,
        treated,
        delta: ImprovementDelta::from_macro_f1(baseline.macro_f1, treated.macro_f1).ok(),
    }
}

/// Side-by-side metrics of two runs over the same items.
pub fn compare_runs(baseline: &RunResult, treated: &RunResult) -> Result<Comparison, RunError> {
    let (b, t) = (&baseline.identity, &treated.identity);
    if b.dataset_checksum != t.dataset_checksum {
        return Err(RunError::Incomparable("dataset checksums differ".into()));
    }
    if b.sample != t.sample {
        return Err(RunError::Incomparable(format!(
            "sample specs differ ({:?} vs {:?})",
            b.sample, t.sample
        )));
    }
    if b.filter != t.filter {
        return Err(RunError::Incomparable("item filters differ".into()));
    }
    let left: BTreeSet<&String> = baseline.item_ids.iter().collect();
    let right: BTreeSet<&String> = treated.item_ids.iter().collect();
    let diff = left.symmetric_difference(&right).count();
    if diff > 0 {
        return Err(RunError::Incomparable(format!(
            "item sets differ: symmetric difference of {diff} items"
        )));
    }

    let aggregates = baseline
        .aggregates
        .iter()
        .filter_map(|a| {
            treated
                .aggregate(&a.key)
                .map(|t| compare_row(&a.key, a.metrics, t.metrics))
        })
        .collect();
    let groups = baseline
        .groups
        .iter()
        .filter_map(|g| {
            let t = treated.groups.iter().find(|t| t.key == g.key)?;
            Some(compare_row(&g.key, g.metrics?, t.metrics?))
        })
        .collect();

    Ok(Comparison {
        baseline_run: baseline.run_id.clone(),
        treated_run: treated.run_id.clone(),
        baseline_template: b.template_id.clone(),
        treated_template: t.template_id.clone(),
        aggregates,
        groups,
    })
}
