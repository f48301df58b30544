//! OpenAI-compatible chat-completion backend with a single image part and a
//! single text part per request.

use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{Backend, BackendError, ClientError, EndpointConfig, TrialRequest};

pub struct OpenAiBackend {
    http: reqwest::Client,
    url: String,
    api_key: Option<String>,
}

impl OpenAiBackend {
    /// Resolves the credential variable named in `endpoint` and builds the
    /// HTTP client.
    pub fn new(endpoint: &EndpointConfig) -> Result<Self, ClientError> {
        endpoint.validate()?;
        let api_key = match &endpoint.api_key_env {
            Some(var) => {
                Some(std::env::var(var).map_err(|_| ClientError::MissingCredential(var.clone()))?)
            }
            None => None,
        };
        Self::with_api_key(endpoint, api_key)
    }

    pub fn with_api_key(
        endpoint: &EndpointConfig,
        api_key: Option<String>,
    ) -> Result<Self, ClientError> {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(endpoint.timeout_secs))
            .build()
            .map_err(|e| ClientError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            http,
            url: format!(
                "{}/chat/completions",
                endpoint.base_url.trim_end_matches('/')
            ),
            api_key,
        })
    }
}

/// Request body for one trial.
pub fn request_body(request: &TrialRequest) -> Value {
    let encoded = base64::engine::general_purpose::STANDARD.encode(request.image());
    let endpoint = request.endpoint();
    json!({
        "model": endpoint.model,
        "messages": [{
            "role": "user",
            "content": [
                {
                    "type": "image_url",
                    "image_url": { "url": format!("data:{};base64,{encoded}", request.media_type()) }
                },
                { "type": "text", "text": request.prompt() }
            ]
        }],
        "temperature": endpoint.temperature,
        "max_tokens": endpoint.max_tokens,
    })
}

/// Pulls the first choice's message text out of a completion response.
pub fn first_message_text(body: &Value) -> Option<String> {
    let content = body.pointer("/choices/0/message/content")?;
    match content {
        Value::String(text) => Some(text.clone()),
        // Some gateways return content as a list of typed parts.
        Value::Array(parts) => {
            let texts: Vec<&str> = parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect();
            (!texts.is_empty()).then(|| texts.concat())
        }
        _ => None,
    }
}

fn is_retryable(status: StatusCode) -> bool {
    status == StatusCode::TOO_MANY_REQUESTS
        || status == StatusCode::REQUEST_TIMEOUT
        || status.is_server_error()
}

#[async_trait]
impl Backend for OpenAiBackend {
    fn name(&self) -> &str {
        "openai"
    }

    async fn send(&self, request: &TrialRequest) -> Result<String, BackendError> {
        let mut builder = self.http.post(&self.url).json(&request_body(request));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().await.map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                BackendError::Transient(e.to_string())
            } else {
                BackendError::Fatal(e.to_string())
            }
        })?;

        let status = response.status();
        let text = response
            .text()
            .await
            .map_err(|e| BackendError::Transient(format!("reading body: {e}")))?;
        if !status.is_success() {
            let snippet: String = text.chars().take(200).collect();
            let message = format!("HTTP {status}: {snippet}");
            return Err(if is_retryable(status) {
                BackendError::Transient(message)
            } else {
                BackendError::Fatal(message)
            });
        }

        let body: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::Fatal(format!("malformed response body: {e}")))?;
        first_message_text(&body)
            .ok_or_else(|| BackendError::Fatal("response has no choices[0].message.content".into()))
    }
}
