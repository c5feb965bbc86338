//! Evaluation: format-following accuracy, ROUGE, summary length statistics,
//! paired significance tests and run comparison.

mod rouge;
mod stats;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use rouge::{
    lcs_len, macro_average, micro_average, ngram_overlap, rouge, rouge_counts, rouge_counts_tokens, rouge_tokens,
    rouge_with, tokenize, Counts, Prf, RougeConfig, RougeCounts, RougeScore,
};
pub use stats::{paired_ttest, paired_ttest_at, TTest, DEFAULT_ALPHA};

use crate::model::{word_count, QuerySummaryPair};
use crate::parse::ParseGrade;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no responses to score")]
    EmptyInput,
    #[error("paired samples differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("a paired test needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("runs cover different job/query sets")]
    JobSetMismatch,
    #[error("job {job_id}: {pairs} pairs but {references} references")]
    ReferenceMismatch { job_id: String, pairs: usize, references: usize },
    #[error("external metric {metric}: no score for job {job_id} query {query_index}")]
    MissingExternalScore { metric: String, job_id: String, query_index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatAccuracy {
    pub strict: f64,
    /// Strict, Repaired or Salvaged.
    pub lenient: f64,
    pub n: usize,
    pub grades: BTreeMap<ParseGrade, usize>,
}

pub fn format_accuracy<I>(grades: I) -> Result<FormatAccuracy, MetricsError>
where
    I: IntoIterator<Item = ParseGrade>,
{
    let mut counts = BTreeMap::new();
    let mut n = 0usize;
    for g in grades {
        *counts.entry(g).or_insert(0) += 1;
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let strict = counts.get(&ParseGrade::Strict).copied().unwrap_or(0);
    let failed = counts.get(&ParseGrade::Failed).copied().unwrap_or(0);
    Ok(FormatAccuracy {
        strict: strict as f64 / n as f64,
        lenient: (n - failed) as f64 / n as f64,
        n,
        grades: counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    /// Mean word count over non-empty texts; absent when all are empty.
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub min: Option<usize>,
    pub max: Option<usize>,
    pub non_empty: usize,
    pub empty: usize,
}

pub fn length_stats<I, S>(texts: I) -> LengthStats
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut lengths = Vec::new();
    let mut empty = 0;
    for t in texts {
        match word_count(t.as_ref()) {
            0 => empty += 1,
            n => lengths.push(n),
        }
    }
    lengths.sort_unstable();
    let k = lengths.len();
    let mean = (k > 0).then(|| lengths.iter().sum::<usize>() as f64 / k as f64);
    let median = (k > 0).then(|| {
        if k % 2 == 1 {
            lengths[k / 2] as f64
        } else {
            (lengths[k / 2 - 1] + lengths[k / 2]) as f64 / 2.0
        }
    });
    LengthStats { mean, median, min: lengths.first().copied(), max: lengths.last().copied(), non_empty: k, empty }
}

/// One job's output as seen by the evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalJob {
    pub job_id: String,
    /// Grade of every primary backend response for the job.
    pub grades: Vec<ParseGrade>,
    pub pairs: Vec<QuerySummaryPair>,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub rouge: RougeConfig,
    pub averaging: Averaging,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub job_id: String,
    pub query_index: usize,
    pub rouge: RougeScore,
    pub summary_words: usize,
    pub empty: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub averaging: Averaging,
    /// Averaged over every pair, empty ones scoring zero.
    pub rouge: RougeScore,
    pub summary_length: LengthStats,
    pub reference_length: LengthStats,
    pub format_accuracy: Option<FormatAccuracy>,
    pub pairs: usize,
    pub empty_pairs: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, f64>,
    pub per_query: Vec<PairScore>,
}

impl RunSummary {
    pub fn build(name: &str, jobs: &[EvalJob], config: &EvalConfig) -> Result<Self, MetricsError> {
        let mut per_query = Vec::new();
        let mut counts = Vec::new();
        for job in jobs {
            if job.pairs.len() != job.references.len() {
                return Err(MetricsError::ReferenceMismatch {
                    job_id: job.job_id.clone(),
                    pairs: job.pairs.len(),
                    references: job.references.len(),
                });
            }
            for (pair, reference) in job.pairs.iter().zip(&job.references) {
                let c = rouge_counts(&pair.summary, reference, &config.rouge);
                counts.push(c);
                per_query.push(PairScore {
                    job_id: job.job_id.clone(),
                    query_index: pair.query_index,
                    rouge: c.score(),
                    summary_words: word_count(&pair.summary),
                    empty: pair.summary.trim().is_empty(),
                    external: BTreeMap::new(),
                });
            }
        }
        let rouge = match config.averaging {
            Averaging::Macro => macro_average(&per_query.iter().map(|p| p.rouge).collect::<Vec<_>>()),
            Averaging::Micro => micro_average(&counts),
        };
        let grades: Vec<ParseGrade> = jobs.iter().flat_map(|j| j.grades.iter().copied()).collect();
        Ok(RunSummary {
            name: name.to_string(),
            averaging: config.averaging,
            rouge,
            summary_length: length_stats(jobs.iter().flat_map(|j| j.pairs.iter().map(|p| p.summary.as_str()))),
            reference_length: length_stats(jobs.iter().flat_map(|j| j.references.iter())),
            format_accuracy: format_accuracy(grades).ok(),
            pairs: per_query.len(),
            empty_pairs: per_query.iter().filter(|p| p.empty).count(),
            external: BTreeMap::new(),
            per_query,
        })
    }

    /// Merges per-pair scores computed outside this crate (for example a
    /// neural similarity metric). Every pair must have a score.
    pub fn merge_external(&mut self, scores: &ExternalScores) -> Result<(), MetricsError> {
        let mut sum = 0.0;
        for p in &mut self.per_query {
            let s = scores.get(&p.job_id, p.query_index).ok_or_else(|| MetricsError::MissingExternalScore {
                metric: scores.metric.clone(),
                job_id: p.job_id.clone(),
                query_index: p.query_index,
            })?;
            p.external.insert(scores.metric.clone(), s);
            sum += s;
        }
        let mean = if self.per_query.is_empty() { 0.0 } else { sum / self.per_query.len() as f64 };
        self.external.insert(scores.metric.clone(), mean);
        Ok(())
    }

    fn keys(&self) -> BTreeSet<(&str, usize)> {
        self.per_query.iter().map(|p| (p.job_id.as_str(), p.query_index)).collect()
    }
}

/// Per-pair scores for one externally computed metric.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExternalScores {
    pub metric: String,
    scores: HashMap<(String, usize), f64>,
}

#[derive(Deserialize)]
struct ExternalLine {
    job_id: String,
    query_index: usize,
    score: f64,
}

impl ExternalScores {
    pub fn new(metric: impl Into<String>) -> Self {
        ExternalScores { metric: metric.into(), scores: HashMap::new() }
    }

    pub fn insert(&mut self, job_id: impl Into<String>, query_index: usize, score: f64) {
        self.scores.insert((job_id.into(), query_index), score);
    }

    pub fn get(&self, job_id: &str, query_index: usize) -> Option<f64> {
        self.scores.get(&(job_id.to_string(), query_index)).copied()
    }

    /// Lines of `{"job_id": .., "query_index": .., "score": ..}`.
    pub fn from_jsonl(metric: impl Into<String>, text: &str) -> Result<Self, serde_json::Error> {
        let mut out = Self::new(metric);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let l: ExternalLine = serde_json::from_str(line)?;
            out.insert(l.job_id, l.query_index, l.score);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub multi: f64,
    pub single: f64,
    pub delta: f64,
    pub ttest: Option<TTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub multi: String,
    pub single: String,
    pub pairs: usize,
    pub format_accuracy_multi: Option<FormatAccuracy>,
    pub format_accuracy_single: Option<FormatAccuracy>,
    pub rows: Vec<ComparisonRow>,
}

fn sorted(run: &RunSummary) -> Vec<&PairScore> {
    let mut v: Vec<&PairScore> = run.per_query.iter().collect();
    v.sort_by(|a, b| a.job_id.cmp(&b.job_id).then(a.query_index.cmp(&b.query_index)));
    v
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

type Extractor = Box<dyn Fn(&PairScore) -> f64>;

pub fn compare_runs(multi: &RunSummary, single: &RunSummary, alpha: f64) -> Result<RunComparison, MetricsError> {
    if multi.keys() != single.keys() {
        return Err(MetricsError::JobSetMismatch);
    }
    let (m, s) = (sorted(multi), sorted(single));
    let mut extractors: Vec<(String, Extractor)> = vec![
        ("rouge1_f1".into(), Box::new(|p: &PairScore| p.rouge.r1.f1)),
        ("rouge2_f1".into(), Box::new(|p: &PairScore| p.rouge.r2.f1)),
        ("rougeL_f1".into(), Box::new(|p: &PairScore| p.rouge.rl.f1)),
    ];
    for name in multi.external.keys().filter(|k| single.external.contains_key(*k)) {
        let key = name.clone();
        extractors.push((name.clone(), Box::new(move |p: &PairScore| p.external.get(&key).copied().unwrap_or(0.0))));
    }
    let mut rows = Vec::new();
    for (metric, f) in &extractors {
        let a: Vec<f64> = m.iter().map(|p| f(p)).collect();
        let b: Vec<f64> = s.iter().map(|p| f(p)).collect();
        rows.push(ComparisonRow {
            metric: metric.clone(),
            multi: mean(&a),
            single: mean(&b),
            delta: mean(&a) - mean(&b),
            ttest: paired_ttest_at(&a, &b, alpha).ok(),
        });
    }
    // Length is compared over pairs non-empty in both runs.
    let (la, lb): (Vec<f64>, Vec<f64>) = m
        .iter()
        .zip(&s)
        .filter(|(x, y)| !x.empty && !y.empty)
        .map(|(x, y)| (x.summary_words as f64, y.summary_words as f64))
        .unzip();
    rows.push(ComparisonRow {
        metric: "summary_words".into(),
        multi: mean(&la),
        single: mean(&lb),
        delta: mean(&la) - mean(&lb),
        ttest: paired_ttest_at(&la, &lb, alpha).ok(),
    });
    Ok(RunComparison {
        multi: multi.name.clone(),
        single: single.name.clone(),
        pairs: m.len(),
        format_accuracy_multi: multi.format_accuracy.clone(),
        format_accuracy_single: single.format_accuracy.clone(),
        rows,
    })
}

impl RunComparison {
    /// Aligned plain-text table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} (multi) vs {} (single), {} pairs", self.multi, self.single, self.pairs);
        if let (Some(a), Some(b)) = (&self.format_accuracy_multi, &self.format_accuracy_single) {
            let _ = writeln!(
                out,
                "format accuracy  strict {:.3} / {:.3}  lenient {:.3} / {:.3}",
                a.strict, b.strict, a.lenient, b.lenient
            );
        }
        let _ = writeln!(out, "{:<14} {:>10} {:>10} {:>10} {:>10}  sig", "metric", "multi", "single", "delta", "p");
        for r in &self.rows {
            let (p, sig) = match &r.ttest {
                Some(t) => (format!("{:.4}", t.p), if t.significant { "*" } else { "" }),
                None => ("-".to_string(), ""),
            };
            let _ = writeln!(
                out,
                "{:<14} {:>10.4} {:>10.4} {:>+10.4} {:>10}  {}",
                r.metric, r.multi, r.single, r.delta, p, sig
            );
        }
        out
    }
}

impl RunSummary {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "run {} ({} pairs, {} empty)", self.name, self.pairs, self.empty_pairs);
        if let Some(a) = &self.format_accuracy {
            let _ = writeln!(out, "format accuracy  strict {:.3}  lenient {:.3}  (n={})", a.strict, a.lenient, a.n);
        }
        let _ = writeln!(out, "{:<8} {:>10} {:>10} {:>10}", "metric", "precision", "recall", "f1");
        for (name, s) in [("rouge1", self.rouge.r1), ("rouge2", self.rouge.r2), ("rougeL", self.rouge.rl)] {
            let _ = writeln!(out, "{:<8} {:>10.4} {:>10.4} {:>10.4}", name, s.precision, s.recall, s.f1);
        }
        for (name, v) in &self.external {
            let _ = writeln!(out, "{:<8} {:>32.4}", name, v);
        }
        let fmt = |m: Option<f64>| m.map_or("-".to_string(), |v| format!("{v:.1}"));
        let _ = writeln!(
            out,
            "mean words  summary {}  reference {}",
            fmt(self.summary_length.mean),
            fmt(self.reference_length.mean)
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MatchMethod;

    fn pair(i: usize, s: &str) -> QuerySummaryPair {
        QuerySummaryPair {
            query_index: i,
            query_text: format!("q{i}"),
            summary: s.into(),
            match_method: if s.is_empty() { MatchMethod::Unmatched } else { MatchMethod::Exact },
            retried: false,
        }
    }

    #[test]
    fn accuracy_tiers() {
        use ParseGrade::*;
        let a = format_accuracy([Strict, Strict, Strict, Strict, Strict, Strict, Salvaged, Salvaged, Failed, Failed]).unwrap();
        assert!((a.strict - 0.6).abs() < 1e-12 && (a.lenient - 0.8).abs() < 1e-12);
        let a = format_accuracy(vec![Strict; 35]).unwrap();
        assert_eq!((a.strict, a.lenient), (1.0, 1.0));
        let a = format_accuracy(vec![Failed; 35]).unwrap();
        assert_eq!((a.strict, a.lenient), (0.0, 0.0));
        assert_eq!(format_accuracy(Vec::new()), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn lengths() {
        let s = length_stats([["w"; 10].join(" "), ["w"; 20].join(" "), String::new()]);
        assert_eq!(s.mean, Some(15.0));
        assert_eq!(s.empty, 1);
        let s = length_stats(["", ""]);
        assert_eq!((s.mean, s.empty), (None, 2));
    }

    fn job(id: &str, summaries: &[&str], refs: &[&str]) -> EvalJob {
        EvalJob {
            job_id: id.into(),
            grades: vec![ParseGrade::Strict],
            pairs: summaries.iter().enumerate().map(|(i, s)| pair(i + 1, s)).collect(),
            references: refs.iter().map(|r| r.to_string()).collect(),
        }
    }

    #[test]
    fn empty_pairs_score_zero_in_macro_average() {
        let jobs = [job("a", &["the cat sat", ""], &["the cat sat", "a dog"])];
        let r = RunSummary::build("run", &jobs, &EvalConfig::default()).unwrap();
        assert!((r.rouge.r1.f1 - 0.5).abs() < 1e-12);
        assert_eq!(r.empty_pairs, 1);
        let bad = [job("a", &["x"], &[])];
        assert!(matches!(RunSummary::build("run", &bad, &EvalConfig::default()), Err(MetricsError::ReferenceMismatch { .. })));
    }

    #[test]
    fn comparing_a_run_with_itself() {
        let jobs = [job("a", &["the cat sat", "on a mat"], &["the cat sat down", "a mat"])];
        let r = RunSummary::build("run", &jobs, &EvalConfig::default()).unwrap();
        let c = compare_runs(&r, &r, DEFAULT_ALPHA).unwrap();
        assert!(c.rows.iter().all(|row| row.delta == 0.0));
        assert!(c.rows.iter().all(|row| row.ttest.unwrap().p == 1.0));
        assert!(c.render_table().contains("rouge1_f1"));
        let other = RunSummary::build("o", &[job("b", &["x", "y"], &["x", "y"])], &EvalConfig::default()).unwrap();
        assert_eq!(compare_runs(&r, &other, DEFAULT_ALPHA), Err(MetricsError::JobSetMismatch));
    }

    #[test]
    fn external_scores_merge() {
        let jobs = [job("a", &["x", "y"], &["x", "z"])];
        let mut r = RunSummary::build("run", &jobs, &EvalConfig::default()).unwrap();
        let scores = ExternalScores::from_jsonl(
            "bertscore",
            "{\"job_id\":\"a\",\"query_index\":1,\"score\":0.9}\n{\"job_id\":\"a\",\"query_index\":2,\"score\":0.5}\n",
        )
        .unwrap();
        r.merge_external(&scores).unwrap();
        assert!((r.external["bertscore"] - 0.7).abs() < 1e-12);
        let partial = ExternalScores::from_jsonl("m", "{\"job_id\":\"a\",\"query_index\":1,\"score\":1}").unwrap();
        assert!(r.merge_external(&partial).is_err());
    }
}
