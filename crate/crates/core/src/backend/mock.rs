//! Deterministic mock backend. Each request draws a failure mode from a
//! seeded profile and answers every query in the prompt with a synthetic
//! summary, rendered in the shape that mode describes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Backend, BackendError, BackendRequest, BackendResponse, ResponseSource, Usage};
use crate::model::{ContextFingerprint, OutputFormat};
use crate::prompt::{extract_queries, extract_transcript, Markers, WordRatioEstimator};

const SUMMARY_WORDS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    Wellformed,
    NumberedNoArray,
    Hallucination,
    Truncated,
    StrayBrackets,
    WrongKeys,
    YamlInsteadOfJson,
}

impl FailureMode {
    pub const ALL: [FailureMode; 7] = [
        FailureMode::Wellformed,
        FailureMode::NumberedNoArray,
        FailureMode::Hallucination,
        FailureMode::Truncated,
        FailureMode::StrayBrackets,
        FailureMode::WrongKeys,
        FailureMode::YamlInsteadOfJson,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FailureMode::Wellformed => "wellformed",
            FailureMode::NumberedNoArray => "numbered_no_array",
            FailureMode::Hallucination => "hallucination",
            FailureMode::Truncated => "truncated",
            FailureMode::StrayBrackets => "stray_brackets",
            FailureMode::WrongKeys => "wrong_keys",
            FailureMode::YamlInsteadOfJson => "yaml_instead_of_json",
        }
    }
}

impl fmt::Display for FailureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FailureMode {
    type Err = ProfileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FailureMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| ProfileError::UnknownMode(s.trim().to_string()))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("unknown failure mode {0:?}")]
    UnknownMode(String),
    #[error("probability for {0} must be finite and non-negative")]
    BadProbability(String),
    #[error("probabilities sum to {0}, expected 1")]
    BadSum(f64),
    #[error("cannot parse profile entry {0:?}; expected mode:probability")]
    Syntax(String),
}

/// Probability mix over failure modes plus the seed that drives draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProfileFields", into = "ProfileFields")]
pub struct FailureModeProfile {
    modes: BTreeMap<FailureMode, f64>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ProfileFields {
    modes: BTreeMap<FailureMode, f64>,
    #[serde(default)]
    seed: u64,
}

impl TryFrom<ProfileFields> for FailureModeProfile {
    type Error = ProfileError;

    fn try_from(f: ProfileFields) -> Result<Self, Self::Error> {
        FailureModeProfile::new(f.modes, f.seed)
    }
}

impl From<FailureModeProfile> for ProfileFields {
    fn from(p: FailureModeProfile) -> Self {
        ProfileFields { modes: p.modes, seed: p.seed }
    }
}

impl FailureModeProfile {
    pub fn new(modes: BTreeMap<FailureMode, f64>, seed: u64) -> Result<Self, ProfileError> {
        for (mode, p) in &modes {
            if !p.is_finite() || *p < 0.0 {
                return Err(ProfileError::BadProbability(mode.to_string()));
            }
        }
        let sum: f64 = modes.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ProfileError::BadSum(sum));
        }
        Ok(FailureModeProfile { modes, seed })
    }

    /// A profile that always produces `mode`.
    pub fn only(mode: FailureMode, seed: u64) -> Self {
        FailureModeProfile { modes: BTreeMap::from([(mode, 1.0)]), seed }
    }

    /// Parses `mode:p,mode:p,...`.
    pub fn parse(spec: &str, seed: u64) -> Result<Self, ProfileError> {
        let mut modes = BTreeMap::new();
        for entry in spec.split(',').filter(|e| !e.trim().is_empty()) {
            let (mode, p) = entry.split_once(':').ok_or_else(|| ProfileError::Syntax(entry.to_string()))?;
            let p: f64 = p.trim().parse().map_err(|_| ProfileError::Syntax(entry.to_string()))?;
            *modes.entry(mode.parse()?).or_insert(0.0) += p;
        }
        Self::new(modes, seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn probability(&self, mode: FailureMode) -> f64 {
        self.modes.get(&mode).copied().unwrap_or(0.0)
    }

    /// Mode for the request with `digest`; a pure function of seed and digest.
    pub fn draw(&self, digest: &str) -> FailureMode {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(digest.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = FailureMode::Wellformed;
        for (mode, p) in &self.modes {
            if *p <= 0.0 {
                continue;
            }
            acc += p;
            last = *mode;
            if u < acc {
                return *mode;
            }
        }
        last
    }
}

#[derive(Debug)]
pub struct MockBackend {
    profile: FailureModeProfile,
    single_query_profile: Option<FailureModeProfile>,
    markers: Markers,
    latency: Duration,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(profile: FailureModeProfile) -> Self {
        MockBackend {
            profile,
            single_query_profile: None,
            markers: Markers::default(),
            latency: Duration::ZERO,
            calls: AtomicU64::new(0),
        }
    }

    pub fn wellformed() -> Self {
        Self::new(FailureModeProfile::only(FailureMode::Wellformed, 0))
    }

    /// Profile used instead for prompts carrying exactly one query.
    pub fn with_single_query_profile(mut self, profile: FailureModeProfile) -> Self {
        self.single_query_profile = Some(profile);
        self
    }

    pub fn with_markers(mut self, markers: Markers) -> Self {
        self.markers = markers;
        self
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn mode_for(&self, request: &BackendRequest) -> FailureMode {
        let profile = match &self.single_query_profile {
            Some(p) if request.prompt.query_count == 1 => p,
            _ => &self.profile,
        };
        profile.draw(&request.digest())
    }

    /// Response text for `request`, without counting a call.
    pub fn respond(&self, request: &BackendRequest) -> String {
        let mode = self.mode_for(request);
        let text = &request.prompt.text;
        let queries = extract_queries(text, &self.markers);
        let words: Vec<&str> = extract_transcript(text, &self.markers).split_whitespace().collect();
        let records: Vec<(String, String)> = queries
            .iter()
            .enumerate()
            .map(|(i, q)| (q.clone(), synth_summary(&request.prompt.job_fingerprint, i + 1, q, &words)))
            .collect();
        render_mode(mode, &records, &words, request.prompt.format)
    }
}

/// Deterministic summary: the query echoed, then a window of transcript
/// words chosen by hashing the context fingerprint and query position.
pub fn synth_summary(fp: &ContextFingerprint, index: usize, query: &str, words: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(fp.as_bytes());
    h.update((index as u64).to_le_bytes());
    let digest = h.finalize();
    let mut start_bytes = [0u8; 8];
    start_bytes.copy_from_slice(&digest[..8]);
    let n = words.len();
    let window = if n == 0 {
        String::new()
    } else {
        let take = SUMMARY_WORDS.min(n);
        let start = (u64::from_le_bytes(start_bytes) % n as u64) as usize;
        (0..take).map(|k| words[(start + k) % n]).collect::<Vec<_>>().join(" ")
    };
    format!("On {query} {window}").trim_end().to_string()
}

fn js(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

#[derive(Serialize)]
struct Rec<'a> {
    query: &'a str,
    summary: &'a str,
}

fn well_formed(records: &[(String, String)], format: OutputFormat) -> String {
    let recs: Vec<Rec> = records.iter().map(|(q, s)| Rec { query: q, summary: s }).collect();
    match format {
        OutputFormat::Json => serde_json::to_string_pretty(&recs).expect("records serialize"),
        OutputFormat::Yaml => serde_yaml::to_string(&recs).expect("records serialize"),
    }
}

fn render_mode(mode: FailureMode, records: &[(String, String)], words: &[&str], format: OutputFormat) -> String {
    let n = records.len();
    match mode {
        FailureMode::Wellformed => well_formed(records, format),
        FailureMode::YamlInsteadOfJson => {
            let other = match format {
                OutputFormat::Json => OutputFormat::Yaml,
                OutputFormat::Yaml => OutputFormat::Json,
            };
            well_formed(records, other)
        }
        FailureMode::NumberedNoArray => {
            let mut out = String::new();
            for (i, (q, s)) in records.iter().enumerate() {
                out.push_str(&format!("#{}\n{{\n  \"query\": {},\n  \"summary\": {}\n}}\n\n", i + 1, js(q), js(s)));
            }
            out.push(']');
            out
        }
        FailureMode::Hallucination => {
            let topic: Vec<String> = words
                .iter()
                .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>())
                .filter(|w| w.len() > 3)
                .take(2)
                .collect();
            let topic = if topic.is_empty() { "overlap issue".to_string() } else { topic.join(" ") };
            format!("What is the main research goal regarding the {topic}?")
        }
        FailureMode::Truncated => {
            let keep = (n / 2).max(1).min(n);
            let mut out = String::from(
                "Based on the provided transcript, here are the JSON objects summarizing the key points of the meeting:\n\n[\n",
            );
            for (q, s) in &records[..keep] {
                out.push_str(&format!("  {{\n    \"query\": {},\n    \"summary\": {}\n  }},\n", js(q), js(s)));
            }
            match records.get(keep) {
                Some((q, _)) => out.push_str(&format!("  {{\n    \"query\": {},\n", js(q))),
                None => out.push_str("  {\n    \"query\": \""),
            }
            out
        }
        FailureMode::StrayBrackets => {
            let mut out = String::new();
            for (q, s) in records {
                out.push_str(&format!("[\n  {{\"query\": {}, \"summary\": {}}}\n]\n", js(q), js(s)));
            }
            out.push_str("[/JSONObjects]\n\n]");
            out
        }
        FailureMode::WrongKeys => {
            let mut out = String::from("[\n");
            for (i, (q, s)) in records.iter().enumerate() {
                let key = if i % 2 == 1 || n == 1 {
                    if (i / 2) % 2 == 0 { ".getText\":".to_string() } else { "\"text\":".to_string() }
                } else {
                    "\"query\":".to_string()
                };
                let sep = if i + 1 < n { "," } else { "" };
                out.push_str(&format!("    {{\n        {key} {},\n        \"summary\": {}\n    }}{sep}\n", js(q), js(s)));
            }
            out.push(']');
            out
        }
    }
}

#[async_trait]
impl Backend for MockBackend {
    async fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        let text = self.respond(request);
        let usage = Usage::estimate(&request.prompt.text, &text, &WordRatioEstimator);
        Ok(BackendResponse {
            text,
            usage,
            latency_ms: self.latency.as_millis() as u64,
            source: ResponseSource::Mock,
            raw_body: None,
        })
    }
}
