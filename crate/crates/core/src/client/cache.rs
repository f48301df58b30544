//! Append-only JSON Lines response cache.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{ClientError, TrialRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model: String,
    pub prompt_sha256: String,
    pub image_sha256: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub response: String,
    pub timestamp: String,
}

impl CacheEntry {
    pub fn new(key: &str, request: &TrialRequest, response: &str) -> Self {
        Self {
            key: key.to_string(),
            model: request.endpoint().model.clone(),
            prompt_sha256: request.prompt_sha256(),
            image_sha256: request.image_sha256().to_string(),
            temperature: request.endpoint().temperature,
            max_tokens: request.endpoint().max_tokens,
            response: response.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        }
    }
}

/// Entries are never rewritten: the first response stored under a key wins.
/// Reads go through an in-memory index; appends are serialized.
pub struct ResponseCache {
    path: PathBuf,
    index: RwLock<HashMap<String, String>>,
    file: Mutex<File>,
}

impl ResponseCache {
    pub fn open(path: &Path) -> Result<Self, ClientError> {
        let err = |message: String| ClientError::Cache {
            path: path.display().to_string(),
            message,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| err(e.to_string()))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)
            .map_err(|e| err(e.to_string()))?;
        let mut text = String::new();
        file.seek(SeekFrom::Start(0))
            .map_err(|e| err(e.to_string()))?;
        file.read_to_string(&mut text)
            .map_err(|e| err(e.to_string()))?;

        let mut index = HashMap::new();
        let mut torn = false;
        let lines: Vec<&str> = text.lines().collect();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<CacheEntry>(line) {
                Ok(entry) => {
                    index.entry(entry.key).or_insert(entry.response);
                }
                // An interrupted append can leave a torn final line.
                Err(e) if i + 1 == lines.len() && !text.ends_with('\n') => {
                    tracing::warn!(path = %path.display(), error = %e, "dropping torn final cache line");
                    torn = true;
                }
                Err(e) => return Err(err(format!("line {}: {e}", i + 1))),
            }
        }
        if torn {
            let valid = text.rfind('\n').map_or(0, |i| i + 1);
            file.set_len(valid as u64).map_err(|e| err(e.to_string()))?;
        } else if !text.is_empty() && !text.ends_with('\n') {
            file.write_all(b"\n").map_err(|e| err(e.to_string()))?;
        }

        Ok(Self {
            path: path.to_path_buf(),
            index: RwLock::new(index),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.index
            .read()
            .expect("cache index lock")
            .get(key)
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache index lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends `entry` unless its key is already present.
    pub fn insert(&self, entry: CacheEntry) -> Result<(), ClientError> {
        let mut file = self.file.lock().expect("cache file lock");
        if self
            .index
            .read()
            .expect("cache index lock")
            .contains_key(&entry.key)
        {
            return Ok(());
        }
        let mut line = serde_json::to_vec(&entry).expect("cache entry serializes");
        line.push(b'\n');
        file.write_all(&line)
            .and_then(|_| file.flush())
            .map_err(|e| ClientError::Cache {
                path: self.path.display().to_string(),
                message: e.to_string(),
            })?;
        self.index
            .write()
            .expect("cache index lock")
            .insert(entry.key, entry.response);
        Ok(())
    }
}
