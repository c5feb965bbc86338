//! Multi-query prompt rendering with input-token budgeting.
//!
//! Layout of a rendered prompt:
//!
//! ```text
//! <instruction>
//!
//! #Queries Begin
//! 1. <q1>
//! ...
//! n. <qn>
//! #Queries End
//!
//! #Transcript Begin
//! <transcript>
//! #Transcript End
//! ```
//!
//! Marker strings occurring inside a transcript are escaped by prefixing
//! [`MARKER_ESCAPE`], so the blocks of a rendered prompt are always unambiguous.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{fingerprint, word_count, ContextFingerprint, MultiQueryJob, OutputFormat};

pub const MARKER_ESCAPE: &str = "\\";

pub const JSON_INSTRUCTION: &str = "A list of queries followed by a transcript is given below. \
For each of the following queries, generate the query-focused summary of the given transcript in an Array of JSON objects. \
You must give your response only in the required Array of JSON objects format and your response for each JSON object \
should contain the corresponding values for the following keys: (i) query and (ii) summary.";

pub const YAML_INSTRUCTION: &str = "A list of queries followed by a transcript is given below. \
For each of the following queries, generate the query-focused summary of the given transcript in a YAML list of mappings. \
You must give your response only in the required YAML list of mappings format and your response for each mapping \
should contain the corresponding values for the following keys: (i) query and (ii) summary.";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("instruction and queries alone need {needed} tokens, budget is {budget}")]
    QueriesDontFit { needed: usize, budget: usize },
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("invalid decoding parameters: {0}")]
    InvalidParams(String),
    #[error("unknown built-in template `{0}`")]
    UnknownTemplate(String),
    #[error("failed to read template file: {0}")]
    Io(String),
}

/// `ceil(words * 100 / 75)`.
pub fn estimate_tokens(text: &str) -> usize {
    tokens_for_words(word_count(text))
}

pub fn tokens_for_words(words: usize) -> usize {
    (words * 100).div_ceil(75)
}

/// Token counting strategy. The word-ratio estimator is the default; exact
/// backend tokenizers plug in here.
pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, text: &str) -> usize;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WordRatioEstimator;

impl TokenEstimator for WordRatioEstimator {
    fn estimate(&self, text: &str) -> usize {
        estimate_tokens(text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Markers {
    pub queries_begin: String,
    pub queries_end: String,
    pub transcript_begin: String,
    pub transcript_end: String,
}

impl Default for Markers {
    fn default() -> Self {
        Self {
            queries_begin: "#Queries Begin".into(),
            queries_end: "#Queries End".into(),
            transcript_begin: "#Transcript Begin".into(),
            transcript_end: "#Transcript End".into(),
        }
    }
}

impl Markers {
    fn all(&self) -> [&str; 4] {
        [&self.queries_begin, &self.queries_end, &self.transcript_begin, &self.transcript_end]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    name: String,
    instruction: String,
    markers: Markers,
    format: OutputFormat,
}

#[derive(Deserialize)]
struct TemplateFile {
    name: Option<String>,
    format: Option<OutputFormat>,
    instruction: Option<String>,
    markers: Option<Markers>,
}

impl PromptTemplate {
    pub fn new(
        name: impl Into<String>,
        instruction: impl Into<String>,
        markers: Markers,
        format: OutputFormat,
    ) -> Result<Self, PromptError> {
        let instruction = instruction.into();
        for key in ["query", "summary"] {
            if !instruction.contains(key) {
                return Err(PromptError::InvalidTemplate(format!("instruction must mention `{key}`")));
            }
        }
        let all = markers.all();
        for (i, m) in all.iter().enumerate() {
            if m.trim().is_empty() {
                return Err(PromptError::InvalidTemplate("markers must be non-empty".into()));
            }
            if m.contains('\n') {
                return Err(PromptError::InvalidTemplate("markers must be single-line".into()));
            }
            if instruction.contains(m) {
                return Err(PromptError::InvalidTemplate(format!("instruction contains marker `{m}`")));
            }
            if all[i + 1..].contains(m) {
                return Err(PromptError::InvalidTemplate(format!("marker `{m}` used twice")));
            }
        }
        Ok(Self { name: name.into(), instruction, markers, format })
    }

    pub fn json_default() -> Self {
        Self::new("json-default", JSON_INSTRUCTION, Markers::default(), OutputFormat::Json)
            .expect("built-in template is valid")
    }

    pub fn yaml_default() -> Self {
        Self::new("yaml-default", YAML_INSTRUCTION, Markers::default(), OutputFormat::Yaml)
            .expect("built-in template is valid")
    }

    pub fn builtin(name: &str) -> Result<Self, PromptError> {
        match name {
            "json-default" | "json" => Ok(Self::json_default()),
            "yaml-default" | "yaml" => Ok(Self::yaml_default()),
            other => Err(PromptError::UnknownTemplate(other.to_string())),
        }
    }

    pub fn for_format(format: OutputFormat) -> Self {
        match format {
            OutputFormat::Json => Self::json_default(),
            OutputFormat::Yaml => Self::yaml_default(),
        }
    }

    /// Parses a TOML template definition. Missing keys fall back to the
    /// built-in template for the declared format.
    pub fn from_toml(text: &str) -> Result<Self, PromptError> {
        let file: TemplateFile =
            toml::from_str(text).map_err(|e| PromptError::InvalidTemplate(e.to_string()))?;
        let format = file.format.unwrap_or_default();
        let base = Self::for_format(format);
        Self::new(
            file.name.unwrap_or_else(|| "custom".into()),
            file.instruction.unwrap_or(base.instruction),
            file.markers.unwrap_or(base.markers),
            format,
        )
    }

    /// A built-in name or a path to a TOML template file.
    pub fn resolve(spec: &str) -> Result<Self, PromptError> {
        match Self::builtin(spec) {
            Ok(t) => Ok(t),
            Err(e) if !Path::new(spec).exists() => Err(e),
            Err(_) => {
                let text = std::fs::read_to_string(spec).map_err(|e| PromptError::Io(e.to_string()))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    pub fn markers(&self) -> &Markers {
        &self.markers
    }

    pub fn format(&self) -> OutputFormat {
        self.format
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub max_input_tokens: usize,
    pub max_output_tokens: usize,
    pub temperature: f64,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self { max_input_tokens: 20_000, max_output_tokens: 2_000, temperature: 1.0 }
    }
}

impl DecodingParams {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.max_input_tokens == 0 || self.max_output_tokens == 0 {
            return Err(PromptError::InvalidParams("token limits must be positive".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(PromptError::InvalidParams("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub estimated_input_tokens: usize,
    pub truncated: bool,
    pub job_fingerprint: ContextFingerprint,
    pub format: OutputFormat,
    pub query_count: usize,
}

fn escape_markers(text: &str, markers: &Markers) -> String {
    let mut out = text.to_string();
    for m in markers.all() {
        if out.contains(m) {
            out = out.replace(m, &format!("{MARKER_ESCAPE}{m}"));
        }
    }
    out
}

fn assemble(template: &PromptTemplate, queries: &str, transcript: &str) -> String {
    let m = &template.markers;
    format!(
        "{}\n\n{}\n{}\n{}\n\n{}\n{}\n{}",
        template.instruction, m.queries_begin, queries, m.queries_end, m.transcript_begin, transcript, m.transcript_end
    )
}

/// Byte offset just past the `k`-th whitespace-delimited word.
fn end_of_word(text: &str, k: usize) -> usize {
    if k == 0 {
        return 0;
    }
    let mut seen = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                seen += 1;
                if seen == k {
                    return i;
                }
            }
            in_word = false;
        } else {
            in_word = true;
        }
    }
    text.len()
}

pub fn render(job: &MultiQueryJob, template: &PromptTemplate, params: &DecodingParams) -> Result<RenderedPrompt, PromptError> {
    render_with(job, template, params, &WordRatioEstimator)
}

pub fn render_with(
    job: &MultiQueryJob,
    template: &PromptTemplate,
    params: &DecodingParams,
    estimator: &dyn TokenEstimator,
) -> Result<RenderedPrompt, PromptError> {
    params.validate()?;
    let queries = job
        .queries()
        .iter()
        .map(|q| format!("{}. {}", q.index(), q.text()))
        .collect::<Vec<_>>()
        .join("\n");
    let transcript = escape_markers(&job.transcript().text, &template.markers);
    let budget = params.max_input_tokens;

    let mut text = assemble(template, &queries, &transcript);
    let mut tokens = estimator.estimate(&text);
    let mut truncated = false;
    if tokens > budget {
        let fixed = estimator.estimate(&assemble(template, &queries, ""));
        if fixed > budget {
            return Err(PromptError::QueriesDontFit { needed: fixed, budget });
        }
        // Largest word prefix of the transcript that fits.
        let (mut lo, mut hi) = (0usize, word_count(&transcript));
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            let candidate = assemble(template, &queries, &transcript[..end_of_word(&transcript, mid)]);
            if estimator.estimate(&candidate) <= budget {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        text = assemble(template, &queries, &transcript[..end_of_word(&transcript, lo)]);
        tokens = estimator.estimate(&text);
        truncated = true;
    }
    Ok(RenderedPrompt {
        text,
        estimated_input_tokens: tokens,
        truncated,
        job_fingerprint: fingerprint(job.transcript().text.as_bytes()),
        format: template.format,
        query_count: job.queries().len(),
    })
}

/// Recovers the numbered query list from a prompt rendered with `markers`.
pub fn extract_queries(prompt: &str, markers: &Markers) -> Vec<String> {
    let Some(start) = prompt.find(&markers.queries_begin) else { return Vec::new() };
    let body = &prompt[start + markers.queries_begin.len()..];
    let Some(end) = body.find(&markers.queries_end) else { return Vec::new() };
    body[..end]
        .lines()
        .filter_map(|l| {
            let (num, rest) = l.split_once(". ")?;
            num.trim().parse::<usize>().ok()?;
            Some(rest.to_string())
        })
        .collect()
}

/// Transcript block of a prompt rendered with `markers` (still escaped).
pub fn extract_transcript<'a>(prompt: &'a str, markers: &Markers) -> &'a str {
    let Some(start) = prompt.find(&markers.transcript_begin) else { return "" };
    let body = &prompt[start + markers.transcript_begin.len()..];
    let end = body.rfind(&markers.transcript_end).unwrap_or(body.len());
    body[..end].trim_matches('\n')
}
