//! Record/replay store: one file per request digest holding the verbatim
//! chat-completions response body.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use async_trait::async_trait;
use serde_json::{json, Value};

use super::{Backend, BackendError, BackendRequest, BackendResponse, ResponseSource, Usage};
use crate::prompt::{TokenEstimator, WordRatioEstimator};

#[derive(Debug, Clone)]
pub struct ReplayStore {
    dir: PathBuf,
}

/// Chat-completions shaped body for a response that did not come with one.
pub fn chat_completion_body(request: &BackendRequest, response: &BackendResponse) -> String {
    let body = json!({
        "id": format!("replay-{}", &request.digest()[..16]),
        "object": "chat.completion",
        "model": request.model_name,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": response.text},
            "finish_reason": "stop"
        }],
        "usage": {
            "prompt_tokens": response.usage.input_tokens,
            "completion_tokens": response.usage.output_tokens,
            "total_tokens": response.usage.input_tokens + response.usage.output_tokens
        },
        "x_usage_estimated": response.usage.estimated
    });
    serde_json::to_string_pretty(&body).expect("body serializes")
}

/// Extracts completion text and usage from a chat-completions body. Missing
/// usage is estimated and flagged.
pub(crate) fn read_body(
    body: &str,
    prompt: &str,
    estimator: &dyn TokenEstimator,
) -> Result<(String, Usage), BackendError> {
    let v: Value = serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))?
        .to_string();
    let reported = v.get("usage").and_then(|u| {
        Some((u.get("prompt_tokens")?.as_u64()?, u.get("completion_tokens")?.as_u64()?))
    });
    let usage = match reported {
        Some((input_tokens, output_tokens)) => Usage {
            input_tokens,
            output_tokens,
            estimated: v.get("x_usage_estimated").and_then(Value::as_bool).unwrap_or(false),
        },
        None => Usage::estimate(prompt, &text, estimator),
    };
    Ok((text, usage))
}

impl ReplayStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(ReplayStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn contains(&self, request: &BackendRequest) -> bool {
        self.path_for(&request.digest()).is_file()
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|d| d.filter_map(Result::ok).filter(|e| e.path().extension().is_some_and(|x| x == "json")).count())
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores the response body under the request digest. Re-recording an
    /// identical body is a no-op; a different body is a conflict.
    pub fn record(&self, request: &BackendRequest, response: &BackendResponse) -> Result<PathBuf, BackendError> {
        let digest = request.digest();
        let path = self.path_for(&digest);
        let body = match &response.raw_body {
            Some(b) => b.clone(),
            None => chat_completion_body(request, response),
        };
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                f.write_all(body.as_bytes())?;
                f.sync_all()?;
                Ok(path)
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                if fs::read_to_string(&path)? == body {
                    Ok(path)
                } else {
                    Err(BackendError::RecordingConflict(digest))
                }
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn raw(&self, request: &BackendRequest) -> Result<String, BackendError> {
        let digest = request.digest();
        match fs::read_to_string(self.path_for(&digest)) {
            Ok(body) => Ok(body),
            Err(e) if e.kind() == ErrorKind::NotFound => Err(BackendError::MissingRecording(digest)),
            Err(e) => Err(e.into()),
        }
    }

    pub fn replay(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let body = self.raw(request)?;
        let (text, usage) = read_body(&body, &request.prompt.text, &WordRatioEstimator)?;
        Ok(BackendResponse { text, usage, latency_ms: 0, source: ResponseSource::Replay, raw_body: Some(body) })
    }
}

/// Serves every request from a replay store.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    store: ReplayStore,
}

impl ReplayBackend {
    pub fn new(store: ReplayStore) -> Self {
        ReplayBackend { store }
    }
}

#[async_trait]
impl Backend for ReplayBackend {
    async fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        self.store.replay(request)
    }
}

/// Forwards to an inner backend and records every successful response.
pub struct RecordingBackend<B> {
    inner: B,
    store: ReplayStore,
}

impl<B> RecordingBackend<B> {
    pub fn new(inner: B, store: ReplayStore) -> Self {
        RecordingBackend { inner, store }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

#[async_trait]
impl<B: Backend> Backend for RecordingBackend<B> {
    async fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let response = self.inner.complete(request).await?;
        self.store.record(request, &response)?;
        Ok(response)
    }
}
