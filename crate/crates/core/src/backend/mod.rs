//! Inference backends: a live OpenAI-compatible client, a replay store of
//! recorded responses, and a deterministic mock that injects malformed
//! outputs.

mod mock;
mod openai;
mod replay;

use std::collections::HashMap;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use mock::{FailureMode, FailureModeProfile, MockBackend, ProfileError};
pub use openai::{OpenAiClient, OpenAiConfig, API_KEY_ENV};
pub use replay::{chat_completion_body, ReplayBackend, ReplayStore, RecordingBackend};

use crate::prompt::{DecodingParams, RenderedPrompt, TokenEstimator, WordRatioEstimator};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("prompt exceeds the model context: {0}")]
    ContextLength(String),
    #[error("backend returned status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("no recording for request {0}")]
    MissingRecording(String),
    #[error("recording {0} already exists with different content")]
    RecordingConflict(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("replay store: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseSource {
    Live,
    Replay,
    Mock,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Counts were estimated locally rather than reported by the backend.
    #[serde(default)]
    pub estimated: bool,
}

impl Usage {
    pub fn estimate(prompt: &str, completion: &str, estimator: &dyn TokenEstimator) -> Self {
        Usage {
            input_tokens: estimator.estimate(prompt) as u64,
            output_tokens: estimator.estimate(completion) as u64,
            estimated: true,
        }
    }

    pub fn add(&mut self, other: &Usage) {
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
        self.estimated |= other.estimated;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub prompt: RenderedPrompt,
    pub params: DecodingParams,
    pub model_name: String,
}

impl BackendRequest {
    pub fn new(prompt: RenderedPrompt, params: DecodingParams, model_name: impl Into<String>) -> Self {
        BackendRequest { prompt, params, model_name: model_name.into() }
    }

    /// Hex SHA-256 over the prompt text, model name and decoding parameters.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            self.prompt.text.as_str(),
            self.model_name.as_str(),
            &self.params.max_input_tokens.to_string(),
            &self.params.max_output_tokens.to_string(),
            &format!("{:?}", self.params.temperature),
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
    pub source: ResponseSource,
    /// Verbatim response body, when the backend produced one.
    #[serde(skip)]
    pub raw_body: Option<String>,
}

#[async_trait]
pub trait Backend: Send + Sync {
    async fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError>;
}

#[async_trait]
impl<B: Backend + ?Sized> Backend for Arc<B> {
    async fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).complete(request).await
    }
}

/// Token counting functions keyed by model name. Models without an entry
/// use the word-ratio estimate.
#[derive(Clone, Default)]
pub struct TokenCounters {
    by_model: HashMap<String, Arc<dyn TokenEstimator>>,
}

impl TokenCounters {
    pub fn register(&mut self, model: impl Into<String>, counter: Arc<dyn TokenEstimator>) {
        self.by_model.insert(model.into(), counter);
    }

    pub fn for_model(&self, model: &str) -> &dyn TokenEstimator {
        match self.by_model.get(model) {
            Some(c) => c.as_ref(),
            None => &WordRatioEstimator,
        }
    }
}

impl std::fmt::Debug for TokenCounters {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TokenCounters").field("models", &self.by_model.keys().collect::<Vec<_>>()).finish()
    }
}
