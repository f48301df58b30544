//! Run configuration and its flat key/value file form.
//!
//! Values resolve with precedence: command-line override, then config file,
//! then built-in default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::client::EndpointConfig;
use crate::dataset::{EvalItem, SampleSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// OpenAI-compatible chat-completion endpoint.
    Openai,
    /// Offline fixture backend.
    Replay,
}

/// Optional restrictions on which items of the dataset are evaluated.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFilter {
    pub split: Option<String>,
    pub subtask: Option<String>,
    pub mode: Option<String>,
}

impl ItemFilter {
    pub fn accepts(&self, item: &EvalItem) -> bool {
        let matches = |want: &Option<String>, have: Option<&str>| {
            want.as_deref().is_none_or(|w| Some(w) == have)
        };
        matches(&self.split, Some(&item.split))
            && matches(&self.subtask, item.subtask.as_deref())
            && matches(&self.mode, item.mode.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub filter: ItemFilter,
    pub template: String,
    /// Directory with a `manifest.toml` of extra user templates.
    pub templates_dir: Option<PathBuf>,
    pub backend: BackendKind,
    pub replay_fixture: Option<PathBuf>,
    pub endpoint: EndpointConfig,
    pub sample: Option<SampleSpec>,
    pub concurrency: usize,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/cache.jsonl`.
    pub cache: Option<PathBuf>,
    /// Base for relative image references; defaults to the dataset's directory.
    pub image_root: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        self.endpoint.validate()?;
        if self.concurrency == 0 {
            return Err(RunError::Config("concurrency must be at least 1".into()));
        }
        if self.backend == BackendKind::Replay && self.replay_fixture.is_none() {
            return Err(RunError::Config(
                "replay backend needs replay_fixture".into(),
            ));
        }
        if let Some(sample) = &self.sample {
            if sample.n_per_class == 0 {
                return Err(RunError::Config("n_per_class must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache
            .clone()
            .unwrap_or_else(|| self.output_dir.join("cache.jsonl"))
    }

    pub fn image_root(&self) -> PathBuf {
        self.image_root.clone().unwrap_or_else(|| {
            self.dataset
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_default()
        })
    }
}

/// Every run setting as an optional flat key. Used both for config files and
/// for command-line overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub dataset: Option<PathBuf>,
    pub split: Option<String>,
    pub subtask: Option<String>,
    pub mode: Option<String>,
    pub template: Option<String>,
    pub templates_dir: Option<PathBuf>,
    pub backend: Option<BackendKind>,
    pub replay_fixture: Option<PathBuf>,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub timeout_secs: Option<u64>,
    pub max_retries: Option<u32>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub n_per_class: Option<usize>,
    pub seed: Option<u64>,
    pub concurrency: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
}

macro_rules! overlay {
    ($self:ident, $other:ident; $($field:ident),* $(,)?) => {
        RunConfigFile { $($field: $other.$field.or($self.$field)),* }
    };
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut file: Self = toml::from_str(&text)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        // Relative paths in a config file are relative to the file itself.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut file.dataset,
            &mut file.templates_dir,
            &mut file.replay_fixture,
            &mut file.output_dir,
            &mut file.cache,
            &mut file.image_root,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(file)
    }

    /// Fields set in `overrides` replace those set here.
    pub fn overlay(self, overrides: RunConfigFile) -> Self {
        overlay!(self, overrides;
            dataset, split, subtask, mode, template, templates_dir, backend,
            replay_fixture, base_url, model, api_key_env, timeout_secs,
            max_retries, temperature, max_tokens, n_per_class, seed,
            concurrency, output_dir, cache, image_root,
        )
    }

    pub fn resolve(self) -> Result<RunConfig, RunError> {
        let defaults = EndpointConfig::default();
        let sample = match (self.n_per_class, self.seed) {
            (Some(n_per_class), seed) => Some(SampleSpec {
                n_per_class,
                seed: seed.unwrap_or(0),
            }),
            (None, Some(_)) => {
                return Err(RunError::Config("seed given without n_per_class".into()))
            }
            (None, None) => None,
        };
        let config = RunConfig {
            dataset: self
                .dataset
                .ok_or_else(|| RunError::Config("dataset is required".into()))?,
            filter: ItemFilter {
                split: self.split,
                subtask: self.subtask,
                mode: self.mode,
            },
            template: self.template.unwrap_or_else(|| "magprompt".into()),
            templates_dir: self.templates_dir,
            backend: self.backend.unwrap_or(BackendKind::Openai),
            replay_fixture: self.replay_fixture,
            endpoint: EndpointConfig {
                base_url: self.base_url.unwrap_or(defaults.base_url),
                model: self.model.unwrap_or(defaults.model),
                api_key_env: self.api_key_env.or(defaults.api_key_env),
                timeout_secs: self.timeout_secs.unwrap_or(defaults.timeout_secs),
                max_retries: self.max_retries.unwrap_or(defaults.max_retries),
                temperature: self.temperature.unwrap_or(defaults.temperature),
                max_tokens: self.max_tokens.unwrap_or(defaults.max_tokens),
            },
            sample,
            concurrency: self.concurrency.unwrap_or(8),
            output_dir: self.output_dir.unwrap_or_else(|| PathBuf::from("runs")),
            cache: self.cache,
            image_root: self.image_root,
        };
        config.validate()?;
        Ok(config)
    }
}
