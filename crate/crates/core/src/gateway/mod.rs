//! Job execution and the coalescing service.
//!
//! [`run_job`] renders a multi-query job (chunked to the policy cap), calls
//! the backend, parses, and applies the fallback policy to queries the
//! response did not answer. [`Gateway`] batches individual requests that
//! share a context into such jobs.

mod http;
mod service;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{router, serve, JobRequest, PolicyOverrides, QueryRequest, QueryResponse};
pub use service::{Gateway, GatewayError, MetricsSnapshot, SingleAnswer};

use crate::backend::{Backend, BackendRequest, ResponseSource, Usage};
use crate::model::{MultiQueryJob, OutputFormat, QuerySummaryPair};
use crate::parse::{parse, ParseGrade, ParseOutcome, ParseReport};
use crate::prompt::{render, DecodingParams, PromptTemplate};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    Empty,
    #[default]
    RetrySingle,
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("max_queries_per_prompt must be at least 1")]
    ZeroCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoalescePolicy {
    pub window_ms: u64,
    pub max_queries_per_prompt: usize,
    pub fallback: Fallback,
    /// Cap on single-query retries per job; `None` means one per query.
    pub max_single_retries_per_job: Option<usize>,
}

impl Default for CoalescePolicy {
    fn default() -> Self {
        CoalescePolicy { window_ms: 250, max_queries_per_prompt: 10, fallback: Fallback::RetrySingle, max_single_retries_per_job: None }
    }
}

impl CoalescePolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.max_queries_per_prompt == 0 {
            return Err(PolicyError::ZeroCap);
        }
        Ok(())
    }
}

/// Everything besides the job and backend that a run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunContext {
    pub template: PromptTemplate,
    pub params: DecodingParams,
    pub policy: CoalescePolicy,
    pub model_name: String,
}

impl RunContext {
    pub fn new(model_name: impl Into<String>) -> Self {
        RunContext {
            template: PromptTemplate::json_default(),
            params: DecodingParams::default(),
            policy: CoalescePolicy::default(),
            model_name: model_name.into(),
        }
    }

    /// The configured template when it matches `format`, else the default
    /// template for `format`.
    pub fn template_for(&self, format: OutputFormat) -> PromptTemplate {
        if self.template.format() == format {
            self.template.clone()
        } else {
            PromptTemplate::for_format(format)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Multi,
    Retry,
    Single,
}

/// One backend call made for a job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub kind: CallKind,
    /// 1-based index of the first query covered.
    pub first_query: usize,
    pub query_count: usize,
    pub digest: String,
    pub grade: Option<ParseGrade>,
    pub source: Option<ResponseSource>,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobError {
    pub first_query: usize,
    pub query_count: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub job_id: String,
    pub pairs: Vec<QuerySummaryPair>,
    /// Parse of the primary response(s); for chunked jobs the chunk reports
    /// merged, graded by the worst chunk.
    pub report: ParseReport,
    pub backend_calls: u32,
    pub usage_total: Usage,
    pub fallback_invocations: u32,
    pub responses: Vec<ResponseRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<JobError>,
}

impl JobResult {
    /// Grades of the primary (non-retry) responses that completed.
    pub fn primary_grades(&self) -> Vec<ParseGrade> {
        self.responses
            .iter()
            .filter(|r| r.kind != CallKind::Retry)
            .filter_map(|r| r.grade)
            .collect()
    }

    pub fn matched(&self) -> usize {
        self.pairs.iter().filter(|p| p.match_method.is_matched()).count()
    }
}

fn failed_report(job: &MultiQueryJob) -> ParseReport {
    ParseReport {
        outcome: ParseOutcome {
            grade: ParseGrade::Failed,
            stages_applied: Vec::new(),
            truncation_detected: false,
            keys_normalized: false,
        },
        pairs: job.queries().iter().map(QuerySummaryPair::unmatched).collect(),
        raw_record_count: 0,
    }
}

fn merge_reports(reports: Vec<(usize, ParseReport)>) -> ParseReport {
    let worst = reports
        .iter()
        .max_by_key(|(_, r)| r.outcome.grade)
        .map(|(_, r)| r.outcome.clone())
        .expect("at least one chunk");
    let mut outcome = worst;
    outcome.truncation_detected = reports.iter().any(|(_, r)| r.outcome.truncation_detected);
    outcome.keys_normalized = reports.iter().any(|(_, r)| r.outcome.keys_normalized);
    let raw_record_count = reports.iter().map(|(_, r)| r.raw_record_count).sum();
    let pairs = reports
        .into_iter()
        .flat_map(|(offset, r)| {
            r.pairs.into_iter().map(move |mut p| {
                p.query_index += offset;
                p
            })
        })
        .collect();
    ParseReport { outcome, pairs, raw_record_count }
}

struct Call {
    record: ResponseRecord,
    report: Option<ParseReport>,
    usage: Option<Usage>,
}

async fn call(
    job: &MultiQueryJob,
    kind: CallKind,
    first_query: usize,
    ctx: &RunContext,
    backend: &dyn Backend,
) -> Call {
    let mut record = ResponseRecord {
        kind,
        first_query,
        query_count: job.queries().len(),
        digest: String::new(),
        grade: None,
        source: None,
        latency_ms: 0,
        error: None,
    };
    let format = job.output_format();
    let prompt = match render(job, &ctx.template_for(format), &ctx.params) {
        Ok(p) => p,
        Err(e) => {
            record.error = Some(e.to_string());
            return Call { record, report: None, usage: None };
        }
    };
    let request = BackendRequest::new(prompt, ctx.params, ctx.model_name.clone());
    record.digest = request.digest();
    match backend.complete(&request).await {
        Ok(response) => {
            let report = parse(&response.text, job.queries(), format);
            record.grade = Some(report.outcome.grade);
            record.source = Some(response.source);
            record.latency_ms = response.latency_ms;
            Call { record, report: Some(report), usage: Some(response.usage) }
        }
        Err(e) => {
            tracing::warn!(error = %e, first_query, "backend call failed");
            record.error = Some(e.to_string());
            Call { record, report: None, usage: None }
        }
    }
}

struct Acc {
    calls: u32,
    usage: Usage,
    responses: Vec<ResponseRecord>,
    errors: Vec<JobError>,
}

impl Acc {
    fn new() -> Self {
        Acc { calls: 0, usage: Usage::default(), responses: Vec::new(), errors: Vec::new() }
    }

    fn take(&mut self, c: Call) -> Option<ParseReport> {
        if !c.record.digest.is_empty() {
            self.calls += 1;
        }
        if let Some(u) = &c.usage {
            self.usage.add(u);
        }
        if let Some(msg) = &c.record.error {
            self.errors.push(JobError {
                first_query: c.record.first_query,
                query_count: c.record.query_count,
                message: msg.clone(),
            });
        }
        self.responses.push(c.record);
        c.report
    }
}

/// Runs `job` as multi-query prompts of at most
/// `ctx.policy.max_queries_per_prompt` queries, then applies the fallback
/// policy to unanswered queries.
pub async fn run_job(job_id: &str, job: &MultiQueryJob, ctx: &RunContext, backend: &dyn Backend) -> JobResult {
    let mut acc = Acc::new();
    let mut reports = Vec::new();
    for (offset, chunk) in job.chunks(ctx.policy.max_queries_per_prompt.max(1)) {
        let c = call(&chunk, CallKind::Multi, offset + 1, ctx, backend).await;
        let report = acc.take(c).unwrap_or_else(|| failed_report(&chunk));
        reports.push((offset, report));
    }
    let report = merge_reports(reports);
    let mut pairs = report.pairs.clone();

    let mut fallback_invocations = 0u32;
    if ctx.policy.fallback == Fallback::RetrySingle {
        let cap = ctx.policy.max_single_retries_per_job.unwrap_or(job.queries().len());
        for pair in pairs.iter_mut().filter(|p| !p.match_method.is_matched()) {
            if fallback_invocations as usize >= cap {
                break;
            }
            let single = job.single(pair.query_index).expect("pair index from job");
            fallback_invocations += 1;
            let c = call(&single, CallKind::Retry, pair.query_index, ctx, backend).await;
            if let Some(r) = acc.take(c) {
                let got = &r.pairs[0];
                if got.match_method.is_matched() {
                    pair.summary = got.summary.clone();
                    pair.match_method = got.match_method;
                    pair.retried = true;
                }
            }
        }
    }

    JobResult {
        job_id: job_id.to_string(),
        pairs,
        report,
        backend_calls: acc.calls,
        usage_total: acc.usage,
        fallback_invocations,
        responses: acc.responses,
        errors: acc.errors,
    }
}

/// Single-query arm: one prompt per query, no fallback.
pub async fn run_job_single_query(job_id: &str, job: &MultiQueryJob, ctx: &RunContext, backend: &dyn Backend) -> JobResult {
    let mut acc = Acc::new();
    let mut reports = Vec::new();
    for q in job.queries() {
        let single = job.single(q.index()).expect("index from job");
        let c = call(&single, CallKind::Single, q.index(), ctx, backend).await;
        let report = acc.take(c).unwrap_or_else(|| failed_report(&single));
        reports.push((q.index() - 1, report));
    }
    let report = merge_reports(reports);
    JobResult {
        job_id: job_id.to_string(),
        pairs: report.pairs.clone(),
        report,
        backend_calls: acc.calls,
        usage_total: acc.usage,
        fallback_invocations: 0,
        responses: acc.responses,
        errors: acc.errors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FailureMode, FailureModeProfile, MockBackend};
    use crate::model::MatchMethod;

    fn eight() -> MultiQueryJob {
        let queries: Vec<String> = (1..=8).map(|i| format!("What was said about topic {i}?")).collect();
        MultiQueryJob::from_texts("job", "A: topics one through eight were discussed at length.", queries).unwrap()
    }

    fn ctx(fallback: Fallback) -> RunContext {
        let mut c = RunContext::new("mock");
        c.policy.fallback = fallback;
        c
    }

    fn block_on<F: std::future::Future>(f: F) -> F::Output {
        tokio::runtime::Builder::new_current_thread().enable_time().build().unwrap().block_on(f)
    }

    #[test]
    fn happy_path_is_one_call() {
        let mock = MockBackend::wellformed();
        let r = block_on(run_job("j", &eight(), &ctx(Fallback::RetrySingle), &mock));
        assert_eq!((r.backend_calls, r.matched(), r.fallback_invocations), (1, 8, 0));
        assert_eq!(r.report.outcome.grade, ParseGrade::Strict);
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn empty_fallback_leaves_blanks() {
        let mock = MockBackend::new(FailureModeProfile::only(FailureMode::Hallucination, 0));
        let r = block_on(run_job("j", &eight(), &ctx(Fallback::Empty), &mock));
        assert_eq!(r.backend_calls, 1);
        assert!(r.pairs.iter().all(|p| p.summary.is_empty() && p.match_method == MatchMethod::Unmatched));
    }

    #[test]
    fn retry_single_fills_in() {
        let mock = MockBackend::new(FailureModeProfile::only(FailureMode::Hallucination, 0))
            .with_single_query_profile(FailureModeProfile::only(FailureMode::Wellformed, 0));
        let r = block_on(run_job("j", &eight(), &ctx(Fallback::RetrySingle), &mock));
        assert_eq!((r.backend_calls, r.matched(), r.fallback_invocations), (9, 8, 8));
        assert!(r.pairs.iter().all(|p| p.retried));
        assert_eq!(mock.calls(), 9);
        assert_eq!(r.primary_grades(), [ParseGrade::Failed]);
    }

    #[test]
    fn retry_cap_is_respected() {
        let mock = MockBackend::new(FailureModeProfile::only(FailureMode::Hallucination, 0));
        let mut c = ctx(Fallback::RetrySingle);
        c.policy.max_single_retries_per_job = Some(3);
        let r = block_on(run_job("j", &eight(), &c, &mock));
        assert_eq!((r.backend_calls, r.fallback_invocations), (4, 3));
    }

    #[test]
    fn chunking_reindexes() {
        let queries: Vec<String> = (1..=11).map(|i| format!("Question number {i}?")).collect();
        let job = MultiQueryJob::from_texts("j", "A: words", queries).unwrap();
        let mock = MockBackend::wellformed();
        let r = block_on(run_job("j", &job, &ctx(Fallback::Empty), &mock));
        assert_eq!(r.backend_calls, 2);
        assert_eq!(r.pairs.iter().map(|p| p.query_index).collect::<Vec<_>>(), (1..=11).collect::<Vec<_>>());
        assert!(r.pairs.iter().all(|p| p.summary.contains(&p.query_text)));
    }

    #[test]
    fn single_query_arm() {
        let mock = MockBackend::wellformed();
        let r = block_on(run_job_single_query("j", &eight(), &ctx(Fallback::Empty), &mock));
        assert_eq!((r.backend_calls, r.matched()), (8, 8));
        assert_eq!(r.primary_grades().len(), 8);
    }
}
