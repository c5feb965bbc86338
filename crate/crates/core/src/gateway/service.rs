//! Windowed coalescing of individual (context, query) requests.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::oneshot;

use super::{run_job, JobResult, RunContext};
use crate::backend::Backend;
use crate::cost::{cost_of, Money, PricingTable};
use crate::model::{fingerprint, ContextFingerprint, ModelError, MultiQueryJob, QuerySummaryPair, Transcript};
use crate::parse::ParseGrade;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("request timed out")]
    Timeout,
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("gateway dropped the request")]
    Dropped,
}

impl From<ModelError> for GatewayError {
    fn from(e: ModelError) -> Self {
        GatewayError::Invalid(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingleAnswer {
    pub pair: QuerySummaryPair,
    pub batch_id: u64,
    /// Distinct queries in the batch that served this request.
    pub batch_size: usize,
}

type Reply = oneshot::Sender<Result<SingleAnswer, GatewayError>>;

struct Slot {
    query: String,
    waiters: Vec<Reply>,
}

struct OpenBatch {
    id: u64,
    context: String,
    slots: Vec<Slot>,
}

#[derive(Default)]
struct Counters {
    requests_in: AtomicU64,
    backend_calls: AtomicU64,
    batches: AtomicU64,
    fallback_invocations: AtomicU64,
    input_tokens: AtomicU64,
    output_tokens: AtomicU64,
    errors: AtomicU64,
    grades: [AtomicU64; 4],
    cost: Mutex<Money>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub requests_in: u64,
    pub backend_calls: u64,
    pub batches: u64,
    /// requests_in / backend_calls; absent before any backend call.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coalesce_ratio: Option<f64>,
    pub parse_grades: BTreeMap<ParseGrade, u64>,
    pub fallback_invocations: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub errors: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimated_cost_usd: Option<String>,
}

const GRADES: [ParseGrade; 4] = [ParseGrade::Strict, ParseGrade::Repaired, ParseGrade::Salvaged, ParseGrade::Failed];

struct Inner {
    backend: Arc<dyn Backend>,
    ctx: RunContext,
    pricing: Option<PricingTable>,
    deadline: Duration,
    open: Mutex<HashMap<ContextFingerprint, OpenBatch>>,
    next_id: AtomicU64,
    counters: Counters,
}

/// Coalescing gateway; cheap to clone and share across tasks.
#[derive(Clone)]
pub struct Gateway {
    inner: Arc<Inner>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, ctx: RunContext) -> Self {
        Gateway {
            inner: Arc::new(Inner {
                backend,
                ctx,
                pricing: None,
                deadline: Duration::from_secs(120),
                open: Mutex::new(HashMap::new()),
                next_id: AtomicU64::new(1),
                counters: Counters::default(),
            }),
        }
    }

    /// Builder-style settings; only valid before the gateway is shared.
    pub fn with_pricing(mut self, pricing: PricingTable) -> Self {
        Arc::get_mut(&mut self.inner).expect("gateway not yet shared").pricing = Some(pricing);
        self
    }

    pub fn with_deadline(mut self, deadline: Duration) -> Self {
        Arc::get_mut(&mut self.inner).expect("gateway not yet shared").deadline = deadline;
        self
    }

    pub fn context(&self) -> &RunContext {
        &self.inner.ctx
    }

    /// Queues `query` against `context`; resolves when its batch has run.
    pub async fn submit_single(&self, context: &str, query: &str) -> Result<SingleAnswer, GatewayError> {
        if query.trim().is_empty() {
            return Err(GatewayError::Invalid("query is empty".into()));
        }
        self.inner.counters.requests_in.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = oneshot::channel();
        let fp = fingerprint(context.as_bytes());
        let policy = self.inner.ctx.policy;
        let full = {
            let mut open = self.inner.open.lock().expect("batch map lock");
            let batch = open.entry(fp).or_insert_with(|| {
                let id = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
                let gw = self.clone();
                tokio::spawn(async move {
                    tokio::time::sleep(Duration::from_millis(policy.window_ms)).await;
                    gw.flush_if_open(fp, id).await;
                });
                OpenBatch { id, context: context.to_string(), slots: Vec::new() }
            });
            match batch.slots.iter_mut().find(|s| s.query == query) {
                Some(slot) => slot.waiters.push(tx),
                None => batch.slots.push(Slot { query: query.to_string(), waiters: vec![tx] }),
            }
            if batch.slots.len() >= policy.max_queries_per_prompt {
                open.remove(&fp)
            } else {
                None
            }
        };
        if let Some(batch) = full {
            let gw = self.clone();
            tokio::spawn(async move { gw.execute(batch).await });
        }
        match tokio::time::timeout(self.inner.deadline, rx).await {
            Ok(Ok(answer)) => answer,
            Ok(Err(_)) => Err(GatewayError::Dropped),
            Err(_) => Err(GatewayError::Timeout),
        }
    }

    async fn flush_if_open(&self, fp: ContextFingerprint, id: u64) {
        let batch = {
            let mut open = self.inner.open.lock().expect("batch map lock");
            match open.get(&fp) {
                Some(b) if b.id == id => open.remove(&fp),
                _ => None,
            }
        };
        if let Some(batch) = batch {
            self.execute(batch).await;
        }
    }

    async fn execute(&self, batch: OpenBatch) {
        let job_id = format!("batch-{}", batch.id);
        let job = Transcript::new(job_id.clone(), batch.context.clone())
            .and_then(|t| {
                let queries = crate::model::Query::list(batch.slots.iter().map(|s| s.query.clone()))?;
                MultiQueryJob::new(t, queries, None, self.inner.ctx.template.format())
            });
        let job = match job {
            Ok(j) => j,
            Err(e) => {
                let err = GatewayError::from(e);
                for slot in batch.slots {
                    for w in slot.waiters {
                        let _ = w.send(Err(err.clone()));
                    }
                }
                return;
            }
        };
        let result = self.run(&job_id, &job).await;
        let failure = (!result.errors.is_empty()).then(|| result.errors.iter().map(|e| e.message.clone()).collect::<Vec<_>>().join("; "));
        let size = batch.slots.len();
        for (slot, pair) in batch.slots.into_iter().zip(result.pairs) {
            for w in slot.waiters {
                let answer = match (&failure, pair.match_method.is_matched()) {
                    (Some(msg), false) => Err(GatewayError::Backend(msg.clone())),
                    _ => Ok(SingleAnswer { pair: pair.clone(), batch_id: batch.id, batch_size: size }),
                };
                let _ = w.send(answer);
            }
        }
    }

    async fn run(&self, job_id: &str, job: &MultiQueryJob) -> JobResult {
        let result = run_job(job_id, job, &self.inner.ctx, self.inner.backend.as_ref()).await;
        self.observe(&result);
        result
    }

    /// Runs a whole job through the gateway's backend, counting each of its
    /// queries as a request.
    pub async fn submit_job(&self, job_id: &str, job: &MultiQueryJob, ctx: Option<&RunContext>) -> JobResult {
        self.inner.counters.requests_in.fetch_add(job.queries().len() as u64, Ordering::Relaxed);
        let ctx = ctx.unwrap_or(&self.inner.ctx);
        let result = run_job(job_id, job, ctx, self.inner.backend.as_ref()).await;
        self.observe(&result);
        result
    }

    fn observe(&self, r: &JobResult) {
        let c = &self.inner.counters;
        c.batches.fetch_add(1, Ordering::Relaxed);
        c.backend_calls.fetch_add(r.backend_calls as u64, Ordering::Relaxed);
        c.fallback_invocations.fetch_add(r.fallback_invocations as u64, Ordering::Relaxed);
        c.input_tokens.fetch_add(r.usage_total.input_tokens, Ordering::Relaxed);
        c.output_tokens.fetch_add(r.usage_total.output_tokens, Ordering::Relaxed);
        c.errors.fetch_add(r.errors.len() as u64, Ordering::Relaxed);
        for g in r.responses.iter().filter_map(|x| x.grade) {
            let i = GRADES.iter().position(|x| *x == g).expect("known grade");
            c.grades[i].fetch_add(1, Ordering::Relaxed);
        }
        if let Some(table) = &self.inner.pricing {
            if let Ok(cost) = cost_of(r.usage_total.input_tokens, r.usage_total.output_tokens, &self.inner.ctx.model_name, table) {
                *c.cost.lock().expect("cost lock") += cost.total();
            }
        }
    }

    pub fn metrics_snapshot(&self) -> MetricsSnapshot {
        let c = &self.inner.counters;
        let requests_in = c.requests_in.load(Ordering::Relaxed);
        let backend_calls = c.backend_calls.load(Ordering::Relaxed);
        let estimated_cost_usd = match &self.inner.pricing {
            Some(t) if t.get(&self.inner.ctx.model_name).is_some() => Some(c.cost.lock().expect("cost lock").to_string()),
            _ => None,
        };
        MetricsSnapshot {
            requests_in,
            backend_calls,
            batches: c.batches.load(Ordering::Relaxed),
            coalesce_ratio: (backend_calls > 0).then(|| requests_in as f64 / backend_calls as f64),
            parse_grades: GRADES.iter().zip(&c.grades).map(|(g, n)| (*g, n.load(Ordering::Relaxed))).collect(),
            fallback_invocations: c.fallback_invocations.load(Ordering::Relaxed),
            input_tokens: c.input_tokens.load(Ordering::Relaxed),
            output_tokens: c.output_tokens.load(Ordering::Relaxed),
            errors: c.errors.load(Ordering::Relaxed),
            estimated_cost_usd,
        }
    }
}
