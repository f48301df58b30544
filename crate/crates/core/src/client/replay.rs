//! Offline backend that answers from a fixture file.
//!
//! Each fixture line is a JSON object with a `response` (or a simulated
//! `failure`) and one of three selectors, tried from most to least specific:
//! the exact cache `key`; `image_sha256` together with `prompt_sha256`; or
//! `image_sha256` alone.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{cache_key, Backend, BackendError, ClientError, TrialRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayFailure {
    Transient,
    Fatal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<ReplayFailure>,
}

impl ReplayEntry {
    fn outcome(&self) -> Result<String, BackendError> {
        match (self.failure, &self.response) {
            (Some(ReplayFailure::Transient), _) => {
                Err(BackendError::Transient("replayed transient failure".into()))
            }
            (Some(ReplayFailure::Fatal), _) => {
                Err(BackendError::Fatal("replayed fatal failure".into()))
            }
            (None, Some(text)) => Ok(text.clone()),
            (None, None) => Err(BackendError::Fatal("replay entry has no response".into())),
        }
    }
}

#[derive(Default)]
pub struct ReplayBackend {
    by_key: HashMap<String, ReplayEntry>,
    by_image_prompt: HashMap<(String, String), ReplayEntry>,
    by_image: HashMap<String, ReplayEntry>,
    calls: AtomicU64,
}

impl ReplayBackend {
    pub fn from_entries(
        entries: impl IntoIterator<Item = ReplayEntry>,
    ) -> Result<Self, ClientError> {
        let mut backend = Self::default();
        for (i, entry) in entries.into_iter().enumerate() {
            let bad = |message: &str| {
                ClientError::InvalidConfig(format!("replay entry {}: {message}", i + 1))
            };
            if entry.response.is_none() && entry.failure.is_none() {
                return Err(bad("needs a response or a failure"));
            }
            let slot = match (&entry.key, &entry.image_sha256, &entry.prompt_sha256) {
                (Some(key), _, _) => backend.by_key.insert(key.clone(), entry.clone()),
                (None, Some(image), Some(prompt)) => backend
                    .by_image_prompt
                    .insert((image.clone(), prompt.clone()), entry.clone()),
                (None, Some(image), None) => backend.by_image.insert(image.clone(), entry.clone()),
                (None, None, _) => return Err(bad("needs key or image_sha256")),
            };
            if slot.is_some() {
                return Err(bad("duplicate selector"));
            }
        }
        Ok(backend)
    }

    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ClientError::InvalidConfig(format!("replay fixture {}: {e}", path.display()))
        })?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, line)| {
                serde_json::from_str(line).map_err(|e| {
                    ClientError::InvalidConfig(format!(
                        "replay fixture {}:{}: {e}",
                        path.display(),
                        i + 1
                    ))
                })
            })
            .collect::<Result<Vec<ReplayEntry>, _>>()?;
        Self::from_entries(entries)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn lookup(&self, request: &TrialRequest) -> Option<&ReplayEntry> {
        let image = request.image_sha256().to_string();
        self.by_key
            .get(&cache_key(request))
            .or_else(|| {
                self.by_image_prompt
                    .get(&(image.clone(), request.prompt_sha256()))
            })
            .or_else(|| self.by_image.get(&image))
    }
}

#[async_trait]
impl Backend for ReplayBackend {
    fn name(&self) -> &str {
        "replay"
    }

    async fn send(&self, request: &TrialRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        match self.lookup(request) {
            Some(entry) => entry.outcome(),
            None => Err(BackendError::Fatal(format!(
                "no replay entry for key {} (image {})",
                cache_key(request),
                request.image_sha256()
            ))),
        }
    }
}
