//! Shared domain types: transcripts, queries, multi-query jobs, recovered
//! query/summary pairs, and the context fingerprint used for coalescing.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("transcript id must be non-empty")]
    EmptyTranscriptId,
    #[error("query {0} is empty")]
    EmptyQuery(usize),
    #[error("a job needs at least one query")]
    NoQueries,
    #[error("query indices must be 1..n contiguous, found {found} at position {position}")]
    NonContiguousIndex { position: usize, found: usize },
    #[error("{references} references supplied for {queries} queries")]
    ReferenceCountMismatch { queries: usize, references: usize },
}

/// Number of maximal non-whitespace runs in `text`.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TranscriptFields")]
pub struct Transcript {
    pub id: String,
    pub text: String,
    #[serde(skip)]
    word_count: usize,
}

#[derive(Deserialize)]
struct TranscriptFields {
    id: String,
    text: String,
}

impl TryFrom<TranscriptFields> for Transcript {
    type Error = ModelError;

    fn try_from(f: TranscriptFields) -> Result<Self, Self::Error> {
        Transcript::new(f.id, f.text)
    }
}

impl Transcript {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, ModelError> {
        let id = id.into();
        if id.trim().is_empty() {
            return Err(ModelError::EmptyTranscriptId);
        }
        let text = text.into();
        let word_count = word_count(&text);
        Ok(Self { id, text, word_count })
    }

    pub fn word_count(&self) -> usize {
        self.word_count
    }

    pub fn fingerprint(&self) -> ContextFingerprint {
        fingerprint(self.text.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Query {
    index: usize,
    text: String,
}

impl Query {
    pub fn new(index: usize, text: impl Into<String>) -> Result<Self, ModelError> {
        let text = text.into();
        if index == 0 {
            return Err(ModelError::NonContiguousIndex { position: 0, found: 0 });
        }
        if text.trim().is_empty() {
            return Err(ModelError::EmptyQuery(index));
        }
        Ok(Self { index, text })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Builds a 1-based query list from plain strings.
    pub fn list<I, S>(texts: I) -> Result<Vec<Query>, ModelError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        texts
            .into_iter()
            .enumerate()
            .map(|(i, t)| Query::new(i + 1, t))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Yaml,
}

impl OutputFormat {
    pub fn as_str(&self) -> &'static str {
        match self {
            OutputFormat::Json => "json",
            OutputFormat::Yaml => "yaml",
        }
    }
}

impl std::str::FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" => Ok(OutputFormat::Json),
            "yaml" | "yml" => Ok(OutputFormat::Yaml),
            other => Err(format!("unknown output format `{other}` (expected json or yaml)")),
        }
    }
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One transcript plus every query asked against it: the unit of coalescing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiQueryJob {
    transcript: Transcript,
    queries: Vec<Query>,
    references: Option<Vec<String>>,
    output_format: OutputFormat,
}

impl MultiQueryJob {
    pub fn new(
        transcript: Transcript,
        queries: Vec<Query>,
        references: Option<Vec<String>>,
        output_format: OutputFormat,
    ) -> Result<Self, ModelError> {
        if queries.is_empty() {
            return Err(ModelError::NoQueries);
        }
        for (position, q) in queries.iter().enumerate() {
            if q.index != position + 1 {
                return Err(ModelError::NonContiguousIndex { position, found: q.index });
            }
        }
        if let Some(refs) = &references {
            if refs.len() != queries.len() {
                return Err(ModelError::ReferenceCountMismatch {
                    queries: queries.len(),
                    references: refs.len(),
                });
            }
        }
        Ok(Self { transcript, queries, references, output_format })
    }

    pub fn from_texts<S: Into<String>>(
        id: impl Into<String>,
        text: impl Into<String>,
        queries: impl IntoIterator<Item = S>,
    ) -> Result<Self, ModelError> {
        Self::new(Transcript::new(id, text)?, Query::list(queries)?, None, OutputFormat::Json)
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn references(&self) -> Option<&[String]> {
        self.references.as_deref()
    }

    pub fn output_format(&self) -> OutputFormat {
        self.output_format
    }

    pub fn with_output_format(mut self, format: OutputFormat) -> Self {
        self.output_format = format;
        self
    }

    pub fn with_references(self, references: Option<Vec<String>>) -> Result<Self, ModelError> {
        Self::new(self.transcript, self.queries, references, self.output_format)
    }

    /// Splits into consecutive sub-jobs of at most `size` queries, re-indexed from 1.
    /// Returns each sub-job with the 0-based offset of its first query.
    pub fn chunks(&self, size: usize) -> Vec<(usize, MultiQueryJob)> {
        let size = size.max(1);
        if self.queries.len() <= size {
            return vec![(0, self.clone())];
        }
        self.queries
            .chunks(size)
            .enumerate()
            .map(|(c, qs)| {
                let offset = c * size;
                let queries = qs
                    .iter()
                    .enumerate()
                    .map(|(i, q)| Query { index: i + 1, text: q.text.clone() })
                    .collect();
                let references = self
                    .references
                    .as_ref()
                    .map(|r| r[offset..offset + qs.len()].to_vec());
                let job = MultiQueryJob {
                    transcript: self.transcript.clone(),
                    queries,
                    references,
                    output_format: self.output_format,
                };
                (offset, job)
            })
            .collect()
    }

    /// The single-query job for query `index` (1-based), used for single-query
    /// runs and retries.
    pub fn single(&self, index: usize) -> Option<MultiQueryJob> {
        let q = self.queries.get(index.checked_sub(1)?)?;
        Some(MultiQueryJob {
            transcript: self.transcript.clone(),
            queries: vec![Query { index: 1, text: q.text.clone() }],
            references: self.references.as_ref().map(|r| vec![r[index - 1].clone()]),
            output_format: self.output_format,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMethod {
    Exact,
    Normalized,
    Fuzzy,
    Positional,
    Unmatched,
}

impl MatchMethod {
    pub fn is_matched(&self) -> bool {
        !matches!(self, MatchMethod::Unmatched)
    }
}

/// One recovered (query, summary) record. Unmatched pairs carry an empty summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySummaryPair {
    pub query_index: usize,
    #[serde(rename = "query")]
    pub query_text: String,
    pub summary: String,
    pub match_method: MatchMethod,
    /// Set when the pair was unmatched in the multi-query response and its
    /// summary came from a single-query retry.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub retried: bool,
}

impl QuerySummaryPair {
    pub fn unmatched(query: &Query) -> Self {
        Self {
            query_index: query.index(),
            query_text: query.text().to_string(),
            summary: String::new(),
            match_method: MatchMethod::Unmatched,
            retried: false,
        }
    }
}

/// SHA-256 over whitespace-normalized context text.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextFingerprint([u8; 32]);

impl ContextFingerprint {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Self(bytes.try_into().ok()?))
    }

    /// First 12 hex characters; used for log lines and synthesized job ids.
    pub fn short(&self) -> String {
        self.to_hex()[..12].to_string()
    }
}

impl fmt::Debug for ContextFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContextFingerprint({})", self.short())
    }
}

impl fmt::Display for ContextFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ContextFingerprint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContextFingerprint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex characters"))
    }
}

/// Trim and collapse whitespace runs to single spaces. Case is preserved.
pub fn normalize_context(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Fingerprint of arbitrary bytes, decoded as UTF-8 with replacement.
pub fn fingerprint(text: &[u8]) -> ContextFingerprint {
    let decoded = String::from_utf8_lossy(text);
    let normalized = normalize_context(&decoded);
    let digest = Sha256::digest(normalized.as_bytes());
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    ContextFingerprint(out)
}
