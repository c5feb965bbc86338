//! Client for OpenAI-compatible chat-completions endpoints.

use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde_json::json;
use tokio::sync::Semaphore;

use super::replay::read_body;
use super::{Backend, BackendError, BackendRequest, BackendResponse, ResponseSource, TokenCounters};

/// Environment variable holding the bearer credential.
pub const API_KEY_ENV: &str = "MQGATE_API_KEY";

#[derive(Debug, Clone)]
pub struct OpenAiConfig {
    /// Base URL up to and including the version segment, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub max_concurrency: usize,
    pub timeout: Duration,
    pub max_attempts: u32,
    pub backoff_base: Duration,
}

impl OpenAiConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        OpenAiConfig {
            base_url: base_url.into(),
            api_key: None,
            max_concurrency: 4,
            timeout: Duration::from_secs(300),
            max_attempts: 3,
            backoff_base: Duration::from_millis(500),
        }
    }

    /// Like [`OpenAiConfig::new`], taking the credential from [`API_KEY_ENV`].
    pub fn from_env(base_url: impl Into<String>) -> Self {
        let mut cfg = Self::new(base_url);
        cfg.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        cfg
    }
}

pub struct OpenAiClient {
    config: OpenAiConfig,
    http: reqwest::Client,
    permits: Arc<Semaphore>,
    counters: TokenCounters,
}

fn is_context_error(body: &str) -> bool {
    let lower = body.to_lowercase();
    lower.contains("context_length_exceeded") || lower.contains("context length") || lower.contains("context window")
}

impl OpenAiClient {
    pub fn new(config: OpenAiConfig) -> Result<Self, BackendError> {
        if config.max_concurrency == 0 || config.max_attempts == 0 {
            return Err(BackendError::Config("max_concurrency and max_attempts must be positive".into()));
        }
        let http = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let permits = Arc::new(Semaphore::new(config.max_concurrency));
        Ok(OpenAiClient { config, http, permits, counters: TokenCounters::default() })
    }

    pub fn with_token_counters(mut self, counters: TokenCounters) -> Self {
        self.counters = counters;
        self
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    /// JSON payload sent for `request`.
    pub fn payload(request: &BackendRequest) -> serde_json::Value {
        json!({
            "model": request.model_name,
            "messages": [{"role": "user", "content": request.prompt.text}],
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_output_tokens,
        })
    }
}

#[async_trait]
impl Backend for OpenAiClient {
    async fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let _permit = self.permits.acquire().await.map_err(|e| BackendError::Config(e.to_string()))?;
        let payload = Self::payload(request);
        let url = self.endpoint();
        let mut last_error = String::new();
        for attempt in 1..=self.config.max_attempts {
            if attempt > 1 {
                tokio::time::sleep(self.config.backoff_base * 2u32.pow(attempt - 2)).await;
            }
            let started = Instant::now();
            let mut builder = self.http.post(&url).json(&payload);
            if let Some(key) = &self.config.api_key {
                builder = builder.bearer_auth(key);
            }
            let response = match builder.send().await {
                Ok(r) => r,
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "request failed");
                    last_error = e.to_string();
                    continue;
                }
            };
            let status = response.status().as_u16();
            let body = match response.text().await {
                Ok(b) => b,
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            };
            match status {
                200..=299 => {
                    let estimator = self.counters.for_model(&request.model_name);
                    let (text, usage) = read_body(&body, &request.prompt.text, estimator)?;
                    return Ok(BackendResponse {
                        text,
                        usage,
                        latency_ms: started.elapsed().as_millis() as u64,
                        source: ResponseSource::Live,
                        raw_body: Some(body),
                    });
                }
                401 | 403 => return Err(BackendError::Auth(body)),
                413 => return Err(BackendError::ContextLength(body)),
                400 if is_context_error(&body) => return Err(BackendError::ContextLength(body)),
                408 | 409 | 429 | 500..=599 => {
                    tracing::warn!(attempt, status, "retryable status");
                    last_error = format!("status {status}: {body}");
                }
                _ => return Err(BackendError::Http { status, body }),
            }
        }
        Err(BackendError::Transport { attempts: self.config.max_attempts, message: last_error })
    }
}
