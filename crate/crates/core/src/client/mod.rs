//! Model client: sends (image, prompt) trials to a backend with a
//! content-addressed response cache, retry with exponential backoff and a
//! bound on in-flight requests.

mod cache;
mod openai;
mod replay;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;

pub use cache::{CacheEntry, ResponseCache};
pub use openai::OpenAiBackend;
pub use replay::{ReplayBackend, ReplayEntry, ReplayFailure};

use crate::dataset::sha256_hex;

const CACHE_KEY_VERSION: &str = "halleval-cache-v1";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("credential variable {0} is not set")]
    MissingCredential(String),
    #[error("gave up after {} attempts: {}", attempts.len(), attempts.join("; "))]
    RetriesExhausted { attempts: Vec<String> },
    #[error("non-retryable error after {} attempt(s): {message}", attempts.len())]
    Fatal {
        message: String,
        attempts: Vec<String>,
    },
    #[error("cache {path}: {message}")]
    Cache { path: String, message: String },
}

impl ClientError {
    /// Per-attempt failure messages, oldest first.
    pub fn attempt_log(&self) -> &[String] {
        match self {
            ClientError::RetriesExhausted { attempts } | ClientError::Fatal { attempts, .. } => {
                attempts
            }
            _ => &[],
        }
    }
}

/// Failure reported by a backend for one attempt.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Timeouts, rate limits, server-side errors: worth retrying.
    #[error("transient: {0}")]
    Transient(String),
    /// Authentication, malformed requests or responses: retrying cannot help.
    #[error("fatal: {0}")]
    Fatal(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-2024-05-13".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            timeout_secs: 60,
            max_retries: 5,
            temperature: 0.0,
            max_tokens: 64,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.timeout_secs == 0 {
            return Err(ClientError::InvalidConfig(
                "timeout must be positive".into(),
            ));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ClientError::InvalidConfig(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        if self.model.is_empty() {
            return Err(ClientError::InvalidConfig(
                "model identifier is empty".into(),
            ));
        }
        Ok(())
    }
}

/// One (image, prompt) trial bound to an endpoint configuration.
#[derive(Debug, Clone)]
pub struct TrialRequest {
    image: Arc<[u8]>,
    media_type: String,
    image_sha256: String,
    prompt: String,
    endpoint: EndpointConfig,
}

impl TrialRequest {
    pub fn new(
        image: impl Into<Arc<[u8]>>,
        media_type: impl Into<String>,
        prompt: impl Into<String>,
        endpoint: EndpointConfig,
    ) -> Result<Self, ClientError> {
        let image = image.into();
        let prompt = prompt.into();
        if image.is_empty() {
            return Err(ClientError::InvalidRequest("image is empty".into()));
        }
        if prompt.is_empty() {
            return Err(ClientError::InvalidRequest("prompt is empty".into()));
        }
        Ok(Self {
            image_sha256: sha256_hex(&image),
            image,
            media_type: media_type.into(),
            prompt,
            endpoint,
        })
    }

    pub fn image(&self) -> &[u8] {
        &self.image
    }

    pub fn media_type(&self) -> &str {
        &self.media_type
    }

    pub fn image_sha256(&self) -> &str {
        &self.image_sha256
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn prompt_sha256(&self) -> String {
        sha256_hex(self.prompt.as_bytes())
    }

    pub fn endpoint(&self) -> &EndpointConfig {
        &self.endpoint
    }
}

/// Media type guessed from an image file extension.
pub fn media_type_for(path: &str) -> &'static str {
    let lower = path.to_ascii_lowercase();
    match lower.rsplit('.').next() {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/jpeg",
    }
}

/// SHA-256 over the canonical serialization of every field that determines
/// a response: model, prompt text, image content hash, temperature and
/// maximum output tokens.
pub fn cache_key(request: &TrialRequest) -> String {
    let canonical = serde_json::json!([
        CACHE_KEY_VERSION,
        request.endpoint.model,
        request.prompt,
        request.image_sha256,
        request.endpoint.temperature,
        request.endpoint.max_tokens,
    ]);
    let bytes = serde_json::to_vec(&canonical).expect("cache key serializes");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResponse {
    /// First message text of the completion, verbatim.
    pub raw_text: String,
    pub latency_ms: u64,
    pub cache_hit: bool,
    /// Backend attempts made; zero for cache hits.
    pub attempts: u32,
}

#[async_trait]
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    async fn send(&self, request: &TrialRequest) -> Result<String, BackendError>;
}

/// Exponential backoff with jitter: `base · 2^attempt`, scaled by a random
/// factor in `[0.5, 1]` and capped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub cap: Duration,
    pub jitter: bool,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            base: Duration::from_secs(1),
            cap: Duration::from_secs(30),
            jitter: true,
        }
    }
}

impl Backoff {
    pub fn none() -> Self {
        Self {
            base: Duration::ZERO,
            cap: Duration::ZERO,
            jitter: false,
        }
    }

    /// Delay before retry number `retry` (0 for the first retry).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.min(20));
        let raw = self.base.saturating_mul(factor).min(self.cap);
        if self.jitter {
            raw.mul_f64(rand::rng().random_range(0.5..=1.0))
        } else {
            raw
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClientStats {
    pub backend_calls: u64,
    pub cache_hits: u64,
}

pub struct ModelClient {
    backend: Arc<dyn Backend>,
    cache: Option<Arc<ResponseCache>>,
    backoff: Backoff,
    in_flight: Semaphore,
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl ModelClient {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            cache: None,
            backoff: Backoff::default(),
            in_flight: Semaphore::new(8),
            backend_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.in_flight = Semaphore::new(limit.max(1));
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats {
            backend_calls: self.backend_calls.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
        }
    }

    pub async fn complete(&self, request: &TrialRequest) -> Result<TrialResponse, ClientError> {
        let key = cache_key(request);
        if let Some(text) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(TrialResponse {
                raw_text: text,
                latency_ms: 0,
                cache_hit: true,
                attempts: 0,
            });
        }

        let _permit = self
            .in_flight
            .acquire()
            .await
            .expect("client semaphore is never closed");
        let started = Instant::now();
        let max_attempts = request.endpoint.max_retries + 1;
        let mut log = Vec::new();
        for attempt in 1..=max_attempts {
            self.backend_calls.fetch_add(1, Ordering::Relaxed);
            match self.backend.send(request).await {
                Ok(text) => {
                    if let Some(cache) = &self.cache {
                        cache.insert(CacheEntry::new(&key, request, &text))?;
                    }
                    return Ok(TrialResponse {
                        raw_text: text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        cache_hit: false,
                        attempts: attempt,
                    });
                }
                Err(BackendError::Fatal(message)) => {
                    log.push(format!("attempt {attempt}: {message}"));
                    return Err(ClientError::Fatal {
                        message,
                        attempts: log,
                    });
                }
                Err(BackendError::Transient(message)) => {
                    log.push(format!("attempt {attempt}: {message}"));
                    if attempt < max_attempts {
                        let delay = self.backoff.delay(attempt - 1);
                        tracing::debug!(attempt, ?delay, %message, "retrying after transient failure");
                        tokio::time::sleep(delay).await;
                    }
                }
            }
        }
        Err(ClientError::RetriesExhausted { attempts: log })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    fn request(prompt: &str) -> TrialRequest {
        TrialRequest::new(
            b"\x89PNG fake".to_vec(),
            "image/png",
            prompt,
            EndpointConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn cache_key_is_deterministic() {
        assert_eq!(
            cache_key(&request("Is there a dog?")),
            cache_key(&request("Is there a dog?"))
        );
    }

    #[test]
    fn cache_key_is_pinned() {
        // Frozen so that keys stay stable across releases and platforms.
        let canonical = format!(
            r#"["halleval-cache-v1","gpt-4o-2024-05-13","Is there a dog?","{}",0.0,64]"#,
            sha256_hex(b"\x89PNG fake")
        );
        assert_eq!(
            cache_key(&request("Is there a dog?")),
            hex::encode(Sha256::digest(canonical.as_bytes()))
        );
    }

    #[test]
    fn cache_key_tracks_every_identity_field() {
        let base = request("Is there a dog?");
        assert_ne!(cache_key(&base), cache_key(&request("Is there a dog!")));

        let endpoint = EndpointConfig {
            temperature: 0.7,
            ..EndpointConfig::default()
        };
        let warmer = TrialRequest::new(
            b"\x89PNG fake".to_vec(),
            "image/png",
            "Is there a dog?",
            endpoint,
        )
        .unwrap();
        assert_ne!(cache_key(&base), cache_key(&warmer));

        let endpoint = EndpointConfig {
            max_tokens: 8,
            ..EndpointConfig::default()
        };
        let shorter = TrialRequest::new(
            b"\x89PNG fake".to_vec(),
            "image/png",
            "Is there a dog?",
            endpoint,
        )
        .unwrap();
        assert_ne!(cache_key(&base), cache_key(&shorter));

        let other_image = TrialRequest::new(
            b"\x89PNG other".to_vec(),
            "image/png",
            "Is there a dog?",
            EndpointConfig::default(),
        )
        .unwrap();
        assert_ne!(cache_key(&base), cache_key(&other_image));

        let endpoint = EndpointConfig {
            timeout_secs: 5,
            ..EndpointConfig::default()
        };
        let patient = TrialRequest::new(
            b"\x89PNG fake".to_vec(),
            "image/png",
            "Is there a dog?",
            endpoint,
        )
        .unwrap();
        assert_eq!(cache_key(&base), cache_key(&patient));
    }

    #[test]
    fn request_invariants() {
        assert!(
            TrialRequest::new(Vec::new(), "image/png", "q", EndpointConfig::default()).is_err()
        );
        assert!(TrialRequest::new(vec![1u8], "image/png", "", EndpointConfig::default()).is_err());
    }

    #[test]
    fn endpoint_validation() {
        let mut cfg = EndpointConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.timeout_secs = 0;
        assert!(cfg.validate().is_err());
        let cfg = EndpointConfig {
            temperature: -0.1,
            ..EndpointConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let b = Backoff {
            base: Duration::from_secs(1),
            cap: Duration::from_secs(30),
            jitter: false,
        };
        let delays: Vec<_> = (0..7).map(|r| b.delay(r).as_secs()).collect();
        assert_eq!(delays, [1, 2, 4, 8, 16, 30, 30]);
        let jittered = Backoff::default();
        for r in 0..8 {
            assert!(jittered.delay(r) <= Duration::from_secs(30));
            assert!(jittered.delay(r) >= b.delay(r) / 2);
        }
    }

    /// Fails with the scripted errors, then answers "Yes.".
    struct Scripted {
        failures: Mutex<Vec<BackendError>>,
    }

    #[async_trait]
    impl Backend for Scripted {
        fn name(&self) -> &str {
            "scripted"
        }

        async fn send(&self, _request: &TrialRequest) -> Result<String, BackendError> {
            match self.failures.lock().unwrap().pop() {
                Some(err) => Err(err),
                None => Ok("Yes.".into()),
            }
        }
    }

    fn scripted(failures: Vec<BackendError>) -> Arc<Scripted> {
        Arc::new(Scripted {
            failures: Mutex::new(failures),
        })
    }

    #[tokio::test]
    async fn retries_transient_failures() {
        let backend = scripted(vec![
            BackendError::Transient("503".into()),
            BackendError::Transient("429".into()),
        ]);
        let client = ModelClient::new(backend).with_backoff(Backoff::none());
        let response = client.complete(&request("q")).await.unwrap();
        assert_eq!(response.raw_text, "Yes.");
        assert_eq!(response.attempts, 3);
        assert!(!response.cache_hit);
    }

    #[tokio::test]
    async fn exhausted_retries_keep_attempt_log() {
        let backend = scripted(vec![BackendError::Transient("timeout".into()); 10]);
        let client = ModelClient::new(backend).with_backoff(Backoff::none());
        let endpoint = EndpointConfig {
            max_retries: 2,
            ..EndpointConfig::default()
        };
        let req = TrialRequest::new(vec![1u8], "image/png", "q", endpoint).unwrap();
        let err = client.complete(&req).await.unwrap_err();
        assert!(matches!(err, ClientError::RetriesExhausted { .. }));
        assert_eq!(err.attempt_log().len(), 3);
        assert_eq!(client.stats().backend_calls, 3);
    }

    #[tokio::test]
    async fn fatal_errors_are_not_retried() {
        let backend = scripted(vec![BackendError::Fatal("401 unauthorized".into())]);
        let client = ModelClient::new(backend).with_backoff(Backoff::none());
        let err = client.complete(&request("q")).await.unwrap_err();
        assert!(matches!(err, ClientError::Fatal { .. }));
        assert_eq!(client.stats().backend_calls, 1);
    }

    #[tokio::test]
    async fn cached_request_skips_backend() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ResponseCache::open(&dir.path().join("cache.jsonl")).unwrap());
        let client = ModelClient::new(scripted(vec![]))
            .with_cache(cache.clone())
            .with_backoff(Backoff::none());
        let first = client.complete(&request("q")).await.unwrap();
        let second = client.complete(&request("q")).await.unwrap();
        assert_eq!(first.raw_text, second.raw_text);
        assert!(second.cache_hit);
        assert_eq!(second.attempts, 0);
        assert_eq!(
            client.stats(),
            ClientStats {
                backend_calls: 1,
                cache_hits: 1
            }
        );
    }

    #[test]
    fn media_types() {
        assert_eq!(media_type_for("a/b.PNG"), "image/png");
        assert_eq!(media_type_for("x.jpg"), "image/jpeg");
        assert_eq!(media_type_for("x.webp"), "image/webp");
    }
}
