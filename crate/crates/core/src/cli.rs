//! Command-line front end. Each subcommand wraps one pipeline stage:
//!
//! | command   | input                          | output                          |
//! |-----------|--------------------------------|---------------------------------|
//! | `convert` | single-query records           | job file, count and histogram   |
//! | `run`     | run manifest                   | `results.jsonl`, `recordings/`  |
//! | `parse`   | raw response and query list    | grade and pairs                 |
//! | `eval`    | results and job file           | report and table                |
//! | `cost`    | results and job file           | ledger and savings              |
//! | `serve`   | serve config                   | HTTP gateway                    |
//!
//! Live credentials come from `MQGATE_API_KEY`.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;
use tokio::task::JoinSet;

use crate::backend::{
    Backend, BackendError, FailureModeProfile, MockBackend, OpenAiClient, OpenAiConfig, ProfileError, RecordingBackend,
    ReplayBackend, ReplayStore, TokenCounters,
};
use crate::cost::{single_query_equivalent, CostError, CostLedger, PricingTable};
use crate::dataset::{convert, jobs_to_jsonl, load_jobs, load_records, DatasetError, RecordFormat, SplitName};
use crate::gateway::{self, run_job, run_job_single_query, CoalescePolicy, Gateway, JobResult, RunContext};
use crate::metrics::{compare_runs, Averaging, RougeConfig, DEFAULT_ALPHA, EvalConfig, EvalJob, ExternalScores, MetricsError, RunSummary};
use crate::model::{MultiQueryJob, OutputFormat};
use crate::parse::parse;
use crate::prompt::{DecodingParams, PromptError, PromptTemplate};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Config { path: String, message: String },
    #[error("{path} line {line}: {message}")]
    Results { path: String, line: usize, message: String },
    #[error("job `{0}` is missing from the job file")]
    UnknownJob(String),
    #[error("job `{0}` has no reference summaries")]
    MissingReferences(String),
    #[error("{0}")]
    Usage(String),
    #[error("threshold not met: {0}")]
    Threshold(String),
    #[error("{failed} of {total} jobs had backend errors")]
    JobErrors { failed: usize, total: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl CliError {
    /// Process exit status: 3 for failed thresholds, 4 for backend failures,
    /// 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Threshold(_) => 3,
            CliError::JobErrors { .. } | CliError::Backend(_) => 4,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Parser)]
#[command(name = "mqgate", version, about = "Multi-query summarization gateway")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Group single-query records into multi-query jobs.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "records")]
        format: RecordFormat,
        #[arg(long, default_value = "test")]
        split: SplitName,
    },
    /// Run every job of a manifest against its backend.
    Run {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Parse one stored response.
    Parse {
        #[arg(long)]
        raw: PathBuf,
        /// One query per line.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value = "json")]
        format: OutputFormat,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Score results against references.
    Eval(EvalArgs),
    /// Token and currency accounting for a results file.
    Cost {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        jobs: PathBuf,
        /// Pricing TOML; the bundled table when absent.
        #[arg(long)]
        pricing: Option<PathBuf>,
        #[arg(long, default_value = "gpt-4o")]
        model: String,
        #[arg(long, default_value = "json-default")]
        template: String,
        /// Per-call ledger output (jsonl).
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Start the HTTP gateway.
    Serve {
        /// Serve config (TOML); a wellformed mock backend when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "MQGATE_ADDR")]
        addr: Option<SocketAddr>,
    },
}

#[derive(Debug, Clone, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub jobs: PathBuf,
    /// Single-query run to compare against.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[arg(long)]
    pub stem: bool,
    #[arg(long, value_enum, default_value_t = AveragingArg::Macro)]
    pub averaging: AveragingArg,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// `name=path` of a per-pair score file, repeatable.
    #[arg(long = "external", value_parser = parse_external)]
    pub externals: Vec<(String, PathBuf)>,
    /// Machine-readable report output.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub min_strict: Option<f64>,
    #[arg(long)]
    pub min_lenient: Option<f64>,
    #[arg(long)]
    pub min_rouge1: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AveragingArg {
    Macro,
    Micro,
}

fn parse_external(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected name=path")?;
    Ok((name.to_string(), PathBuf::from(path)))
}

/// Writes via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| CliError::Io { path: path.display().to_string(), source: e.error })?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Multi,
    Single,
}

fn default_profile() -> String {
    "wellformed:1".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Mock {
        /// `mode:p,...`; see [`FailureModeProfile::parse`].
        #[serde(default = "default_profile")]
        profile: String,
        /// Profile used for one-query prompts (retries, single arm).
        #[serde(default)]
        single_query_profile: Option<String>,
        #[serde(default)]
        latency_ms: u64,
    },
    Replay {
        dir: PathBuf,
    },
    Live {
        base_url: String,
        #[serde(default)]
        max_concurrency: Option<usize>,
        #[serde(default)]
        timeout_secs: Option<u64>,
    },
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Mock { profile: default_profile(), single_query_profile: None, latency_ms: 0 }
    }
}

impl BackendSpec {
    /// Builds the backend; relative paths resolve against `base`.
    pub fn build(&self, seed: u64, base: &Path) -> Result<Arc<dyn Backend>, CliError> {
        Ok(match self {
            BackendSpec::Mock { profile, single_query_profile, latency_ms } => {
                let mut mock = MockBackend::new(FailureModeProfile::parse(profile, seed)?)
                    .with_latency(Duration::from_millis(*latency_ms));
                if let Some(p) = single_query_profile {
                    mock = mock.with_single_query_profile(FailureModeProfile::parse(p, seed)?);
                }
                Arc::new(mock)
            }
            BackendSpec::Replay { dir } => Arc::new(ReplayBackend::new(ReplayStore::open(base.join(dir))?)),
            BackendSpec::Live { base_url, max_concurrency, timeout_secs } => {
                let mut config = OpenAiConfig::from_env(base_url.clone());
                if let Some(n) = max_concurrency {
                    config.max_concurrency = *n;
                }
                if let Some(s) = timeout_secs {
                    config.timeout = Duration::from_secs(*s);
                }
                Arc::new(OpenAiClient::new(config)?.with_token_counters(TokenCounters::default()))
            }
        })
    }

    fn concurrency(&self) -> usize {
        match self {
            BackendSpec::Live { max_concurrency, .. } => max_concurrency.unwrap_or(4),
            _ => 4,
        }
    }
}

fn default_template() -> String {
    "json-default".to_string()
}

fn default_model() -> String {
    "mock".to_string()
}

/// Everything a batch run depends on. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_template")]
    pub template: String,
    /// Overrides every job's output format.
    #[serde(default)]
    pub format: Option<OutputFormat>,
    #[serde(default)]
    pub params: DecodingParams,
    #[serde(default)]
    pub backend: BackendSpec,
    #[serde(default)]
    pub policy: CoalescePolicy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default)]
    pub concurrency: Option<usize>,
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |message: String| CliError::Config { path: path.display().to_string(), message };
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
    } else {
        toml::from_str(&text).map_err(|e| bad(e.to_string()))
    }
}

fn base_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn resolve_template(spec: &str, base: &Path) -> Result<PromptTemplate, CliError> {
    let local = base.join(spec);
    if PromptTemplate::builtin(spec).is_err() && local.exists() {
        return Ok(PromptTemplate::resolve(&local.to_string_lossy())?);
    }
    Ok(PromptTemplate::resolve(spec)?)
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let m: RunManifest = read_config(path)?;
        m.params.validate()?;
        m.policy.validate().map_err(|e| CliError::Config { path: path.display().to_string(), message: e.to_string() })?;
        Ok(m)
    }

    pub fn context(&self, base: &Path) -> Result<RunContext, CliError> {
        let mut ctx = RunContext::new(self.model.clone());
        ctx.template = resolve_template(&self.template, base)?;
        ctx.params = self.params;
        ctx.policy = self.policy;
        Ok(ctx)
    }
}

pub fn results_to_jsonl(results: &[JobResult]) -> String {
    results.iter().map(|r| serde_json::to_string(r).expect("result serializes") + "\n").collect()
}

pub fn load_results(path: &Path) -> Result<Vec<JobResult>, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(line).map_err(|e| CliError::Results {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

/// Outcome of [`run_manifest`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub results: Vec<JobResult>,
    pub results_path: PathBuf,
    pub recordings: Option<PathBuf>,
}

/// Runs every job of the manifest and writes `results.jsonl` sorted by job
/// id. Mock and live responses are also recorded under `recordings/`.
pub async fn run_manifest(manifest: &RunManifest, base: &Path) -> Result<RunOutput, CliError> {
    let ctx = Arc::new(manifest.context(base)?);
    let mut jobs = load_jobs(&base.join(&manifest.dataset))?;
    if let Some(f) = manifest.format {
        jobs = jobs.into_iter().map(|j| j.with_output_format(f)).collect();
    }
    let out_dir = base.join(&manifest.output_dir);
    let inner = manifest.backend.build(manifest.seed, base)?;
    let (backend, recordings): (Arc<dyn Backend>, _) = match manifest.backend {
        BackendSpec::Replay { .. } => (inner, None),
        _ => {
            let dir = out_dir.join("recordings");
            (Arc::new(RecordingBackend::new(inner, ReplayStore::open(&dir)?)), Some(dir))
        }
    };

    let limit = Arc::new(Semaphore::new(manifest.concurrency.unwrap_or(manifest.backend.concurrency()).max(1)));
    let mode = manifest.mode;
    let mut set = JoinSet::new();
    for job in jobs {
        let (ctx, backend, limit) = (ctx.clone(), backend.clone(), limit.clone());
        set.spawn(async move {
            let _permit = limit.acquire_owned().await.expect("semaphore open");
            let id = job.transcript().id.clone();
            match mode {
                RunMode::Multi => run_job(&id, &job, &ctx, backend.as_ref()).await,
                RunMode::Single => run_job_single_query(&id, &job, &ctx, backend.as_ref()).await,
            }
        });
    }
    let mut results = Vec::new();
    while let Some(r) = set.join_next().await {
        results.push(r.expect("job task panicked"));
    }
    results.sort_by(|a, b| a.job_id.cmp(&b.job_id));
    let results_path = out_dir.join("results.jsonl");
    write_atomic(&results_path, results_to_jsonl(&results).as_bytes())?;
    Ok(RunOutput { results, results_path, recordings })
}

/// Job file indexed by transcript id.
fn jobs_by_id(path: &Path) -> Result<HashMap<String, MultiQueryJob>, CliError> {
    Ok(load_jobs(path)?.into_iter().map(|j| (j.transcript().id.clone(), j)).collect())
}

fn eval_jobs(results: &[JobResult], jobs: &HashMap<String, MultiQueryJob>) -> Result<Vec<EvalJob>, CliError> {
    results
        .iter()
        .map(|r| {
            let job = jobs.get(&r.job_id).ok_or_else(|| CliError::UnknownJob(r.job_id.clone()))?;
            let references = job.references().ok_or_else(|| CliError::MissingReferences(r.job_id.clone()))?;
            Ok(EvalJob {
                job_id: r.job_id.clone(),
                grades: r.primary_grades(),
                pairs: r.pairs.clone(),
                references: references.to_vec(),
            })
        })
        .collect()
}

/// Report written by `eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: RunSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<crate::metrics::RunComparison>,
    pub failed_thresholds: Vec<String>,
}

pub fn evaluate(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let jobs = jobs_by_id(&args.jobs)?;
    let config = EvalConfig {
        rouge: RougeConfig { stem: args.stem },
        averaging: match args.averaging {
            AveragingArg::Macro => Averaging::Macro,
            AveragingArg::Micro => Averaging::Micro,
        },
    };
    let mut externals = Vec::new();
    for (name, path) in &args.externals {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let scores = ExternalScores::from_jsonl(name.clone(), &text).map_err(|e| CliError::Results {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        externals.push(scores);
    }
    let summarize = |path: &Path| -> Result<RunSummary, CliError> {
        let name = path.display().to_string();
        let mut s = RunSummary::build(&name, &eval_jobs(&load_results(path)?, &jobs)?, &config)?;
        for e in &externals {
            s.merge_external(e)?;
        }
        Ok(s)
    };
    let summary = summarize(&args.results)?;
    let comparison = match &args.compare {
        Some(p) => Some(compare_runs(&summary, &summarize(p)?, args.alpha)?),
        None => None,
    };

    let mut failed = Vec::new();
    let acc = summary.format_accuracy.as_ref();
    let checks = [
        ("strict accuracy", args.min_strict, acc.map(|a| a.strict)),
        ("lenient accuracy", args.min_lenient, acc.map(|a| a.lenient)),
        ("rouge1 f1", args.min_rouge1, Some(summary.rouge.r1.f1)),
    ];
    for (name, min, got) in checks {
        if let Some(min) = min {
            match got {
                Some(v) if v >= min => {}
                Some(v) => failed.push(format!("{name} {v:.4} < {min}")),
                None => failed.push(format!("{name} unavailable")),
            }
        }
    }
    Ok(EvalReport { summary, comparison, failed_thresholds: failed })
}

/// Ledger plus single-query equivalent for a results file.
pub fn cost_ledger(
    results: &[JobResult],
    jobs: &HashMap<String, MultiQueryJob>,
    table: &PricingTable,
    model: &str,
    template: &PromptTemplate,
) -> Result<CostLedger, CliError> {
    let estimator = crate::prompt::WordRatioEstimator;
    let params = DecodingParams::default();
    let mut ledger = CostLedger::new();
    for r in results {
        let job = jobs.get(&r.job_id).ok_or_else(|| CliError::UnknownJob(r.job_id.clone()))?;
        ledger.record(&r.job_id, model, &r.usage_total, table)?;
        let template = if template.format() == job.output_format() {
            template.clone()
        } else {
            PromptTemplate::for_format(job.output_format())
        };
        let eq = single_query_equivalent(job, &template, &params, table, model, Some(&r.pairs), &estimator)?;
        ledger.add_single_query_equivalent(&eq);
    }
    Ok(ledger)
}

/// Serve-time configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    #[serde(default = "default_addr")]
    pub addr: SocketAddr,
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default)]
    pub params: DecodingParams,
    #[serde(default)]
    pub backend: BackendSpec,
    #[serde(default)]
    pub policy: CoalescePolicy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_model")]
    pub model: String,
    /// Pricing TOML for the cost counter; the bundled table when absent.
    #[serde(default)]
    pub pricing: Option<PathBuf>,
    #[serde(default)]
    pub deadline_secs: Option<u64>,
}

fn default_addr() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            addr: default_addr(),
            template: default_template(),
            params: DecodingParams::default(),
            backend: BackendSpec::default(),
            policy: CoalescePolicy::default(),
            seed: 0,
            model: default_model(),
            pricing: None,
            deadline_secs: None,
        }
    }
}

impl ServeConfig {
    pub fn gateway(&self, base: &Path) -> Result<Gateway, CliError> {
        let mut ctx = RunContext::new(self.model.clone());
        ctx.template = resolve_template(&self.template, base)?;
        ctx.params = self.params;
        ctx.policy = self.policy;
        let pricing = match &self.pricing {
            Some(p) => PricingTable::load(&base.join(p))?,
            None => PricingTable::builtin(),
        };
        let mut gw = Gateway::new(self.backend.build(self.seed, base)?, ctx).with_pricing(pricing);
        if let Some(s) = self.deadline_secs {
            gw = gw.with_deadline(Duration::from_secs(s));
        }
        Ok(gw)
    }
}

fn read_queries(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn clip(s: &str, n: usize) -> String {
    let mut out: String = s.chars().take(n).collect();
    if s.chars().count() > n {
        out.push_str("...");
    }
    out
}

/// Runs one command, writing human output to `out`.
pub async fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let w = |e: std::io::Error| CliError::Io { path: "<stdout>".into(), source: e };
    match cli.command {
        Command::Convert { input, output, format, split } => {
            let records = load_records(&input, format)?;
            let split = convert(split, &records)?;
            write_atomic(&output, jobs_to_jsonl(&split.jobs).as_bytes())?;
            writeln!(out, "{} jobs from {} records", split.jobs.len(), records.len()).map_err(w)?;
            for (queries, jobs) in split.query_histogram() {
                writeln!(out, "  {queries:>3} queries: {jobs} jobs").map_err(w)?;
            }
        }
        Command::Run { manifest } => {
            let m = RunManifest::load(&manifest)?;
            let run = run_manifest(&m, &base_dir(&manifest)).await?;
            let failed = run.results.iter().filter(|r| !r.errors.is_empty()).count();
            let grades = run.results.iter().flat_map(|r| r.primary_grades());
            writeln!(out, "{} results -> {}", run.results.len(), run.results_path.display()).map_err(w)?;
            if let Ok(acc) = crate::metrics::format_accuracy(grades) {
                writeln!(out, "strict {:.4} lenient {:.4} over {} responses", acc.strict, acc.lenient, acc.n).map_err(w)?;
            }
            if failed > 0 {
                return Err(CliError::JobErrors { failed, total: run.results.len() });
            }
        }
        Command::Parse { raw, queries, format, json } => {
            let text = std::fs::read_to_string(&raw).map_err(io_err(&raw))?;
            let queries = crate::model::Query::list(read_queries(&queries)?)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let report = parse(&text, &queries, format);
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&report).expect("report serializes")).map_err(w)?;
                return Ok(());
            }
            let o = &report.outcome;
            let stages: Vec<String> = o
                .stages_applied
                .iter()
                .map(|s| serde_json::to_value(s).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default())
                .collect();
            writeln!(out, "grade: {:?}", o.grade).map_err(w)?;
            writeln!(out, "stages: {}", stages.join(" > ")).map_err(w)?;
            writeln!(out, "truncation_detected: {}", o.truncation_detected).map_err(w)?;
            writeln!(out, "keys_normalized: {}", o.keys_normalized).map_err(w)?;
            writeln!(out, "raw_records: {}", report.raw_record_count).map_err(w)?;
            writeln!(out, "pairs: {} ({} matched)", report.pairs.len(), report.matched()).map_err(w)?;
            for p in &report.pairs {
                writeln!(out, "  [{}] {:?}: {} -> {}", p.query_index, p.match_method, clip(&p.query_text, 50), clip(&p.summary, 60))
                    .map_err(w)?;
            }
        }
        Command::Eval(args) => {
            let report = evaluate(&args)?;
            match &report.comparison {
                Some(c) => write!(out, "{}", c.render_table()).map_err(w)?,
                None => write!(out, "{}", report.summary.render_table()).map_err(w)?,
            }
            if let Some(p) = &args.report {
                let body = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
                write_atomic(p, body.as_bytes())?;
            }
            if !report.failed_thresholds.is_empty() {
                return Err(CliError::Threshold(report.failed_thresholds.join("; ")));
            }
        }
        Command::Cost { results, jobs, pricing, model, template, ledger } => {
            let table = match &pricing {
                Some(p) => PricingTable::load(p)?,
                None => PricingTable::builtin(),
            };
            let template = PromptTemplate::resolve(&template)?;
            let l = cost_ledger(&load_results(&results)?, &jobs_by_id(&jobs)?, &table, &model, &template)?;
            if let Some(p) = &ledger {
                write_atomic(p, l.to_jsonl().as_bytes())?;
            }
            let s = l.summary();
            let rows: BTreeMap<&str, String> = [
                ("jobs", s.calls.to_string()),
                ("input_tokens", s.input_tokens.to_string()),
                ("output_tokens", s.output_tokens.to_string()),
                ("input_cost_usd", s.input_cost_usd.clone()),
                ("output_cost_usd", s.output_cost_usd.clone()),
                ("single_query_input_tokens", s.single_query_input_tokens.to_string()),
                ("single_query_input_cost_usd", s.single_query_input_cost_usd.clone()),
                ("savings_ratio", s.savings_ratio.map_or("n/a".into(), |r| format!("{r:.3}"))),
                ("token_savings_ratio", l.token_savings_ratio().map_or("n/a".into(), |r| format!("{r:.3}"))),
            ]
            .into_iter()
            .collect();
            writeln!(out, "model: {model}").map_err(w)?;
            for (k, v) in rows {
                writeln!(out, "{k}: {v}").map_err(w)?;
            }
        }
        Command::Serve { config, addr } => {
            let (cfg, base) = match &config {
                Some(p) => (read_config::<ServeConfig>(p)?, base_dir(p)),
                None => (ServeConfig::default(), PathBuf::from(".")),
            };
            let gw = cfg.gateway(&base)?;
            let addr = addr.unwrap_or(cfg.addr);
            gateway::serve(addr, gw).await.map_err(|e| CliError::Io { path: addr.to_string(), source: e })?;
        }
    }
    Ok(())
}
