//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria whose inputs are not present (public dataset, recorded runs of
//! hosted models) print FAIL with the missing input named; they do not fail
//! the process. Every evaluable criterion that fails does.
//!
//! Inputs:
//! * `QMSUM_DIR`: directory holding `train.jsonl`, `val.jsonl`, `test.jsonl`
//!   in the upstream QMSum layout.
//! * `MQGATE_RECORDED_RUN`: directory holding `multi.jsonl` and
//!   `single.jsonl` result files from a recorded hosted-model run.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mqgate::backend::{Backend, FailureModeProfile, MockBackend, RecordingBackend, ReplayBackend, ReplayStore};
use mqgate::cli::load_results;
use mqgate::cost::{single_query_equivalent, CostLedger, PricingTable};
use mqgate::dataset::{convert, load_records, parse_records, RecordFormat, SplitName};
use mqgate::fixture::{bundled_dir, load_all};
use mqgate::gateway::{run_job, Gateway, RunContext};
use mqgate::metrics::{format_accuracy, paired_ttest, rouge_counts_tokens, EvalConfig, EvalJob, RunSummary};
use mqgate::model::word_count;
use mqgate::parse::{parse, parse_bytes, serialize, ParseGrade};
use mqgate::prompt::{estimate_tokens, WordRatioEstimator};
use mqgate::{MatchMethod, MultiQueryJob, OutputFormat, Query, QuerySummaryPair};

enum Verdict {
    Pass(String),
    Fail(String),
    Blocked(String),
}

struct Outcome {
    id: &'static str,
    name: &'static str,
    verdict: Verdict,
    elapsed: Duration,
    budget: Duration,
}

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

// 1 -------------------------------------------------------------------------

const QMSUM_SPLITS: [(SplitName, &str, usize, usize); 3] =
    [(SplitName::Train, "train", 1257, 162), (SplitName::Validation, "val", 272, 35), (SplitName::Test, "test", 281, 35)];

fn qmsum_dir() -> Option<PathBuf> {
    std::env::var_os("QMSUM_DIR").map(PathBuf::from).filter(|p| p.join("test.jsonl").exists())
}

fn dataset_reproduction() -> Verdict {
    let Some(dir) = qmsum_dir() else {
        return Verdict::Blocked("QMSUM_DIR not set or missing test.jsonl; expected 162/35/35 jobs from 1257/272/281".into());
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for (split, file, want_records, want_jobs) in QMSUM_SPLITS {
        match load_records(&dir.join(format!("{file}.jsonl")), RecordFormat::Qmsum).and_then(|r| Ok((r.len(), convert(split, &r)?))) {
            Ok((records, s)) => {
                ok &= records == want_records && s.jobs.len() == want_jobs;
                parts.push(format!("{file} {}/{records}", s.jobs.len()));
            }
            Err(e) => return Verdict::Fail(format!("{file}: {e}")),
        }
    }
    check(ok, format!("jobs/records {} (want 162/1257, 35/272, 35/281)", parts.join(", ")))
}

// 2 -------------------------------------------------------------------------

fn fixture_suite() -> Verdict {
    let want: [(&str, ParseGrade, usize, bool, bool); 5] = [
        ("hallucination", ParseGrade::Failed, 0, false, false),
        ("numbered_no_array", ParseGrade::Salvaged, 5, false, false),
        ("stray_brackets", ParseGrade::Salvaged, 3, false, false),
        ("truncated", ParseGrade::Salvaged, 1, true, false),
        ("wrong_keys", ParseGrade::Salvaged, 4, false, true),
    ];
    let cases = match load_all(&bundled_dir()) {
        Ok(c) => c,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    if cases.len() != want.len() {
        return Verdict::Fail(format!("{} fixtures found", cases.len()));
    }
    let mut failures = Vec::new();
    let mut seen = Vec::new();
    for (case, (name, grade, matched, trunc, keys)) in cases.iter().zip(want) {
        let r = case.run();
        let o = &r.outcome;
        let good = case.name == name
            && o.grade == grade
            && r.matched() == matched
            && o.truncation_detected == trunc
            && o.keys_normalized == keys
            && case.check(&r).is_empty();
        if !good {
            failures.push(format!("{}: {:?}/{}", case.name, o.grade, r.matched()));
        }
        seen.push(format!("{} {:?}/{}", case.name, o.grade, r.matched()));
    }
    check(failures.is_empty(), if failures.is_empty() { seen.join(", ") } else { failures.join(", ") })
}

// 3 -------------------------------------------------------------------------

fn exact_words(n: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(9000);
    let words = ["budget", "remote", "design", "battery", "button", "screen", "we", "should", "the", "price"];
    let mut lines = Vec::new();
    let mut left = n;
    let mut i = 0;
    while left > 0 {
        let k = left.min(20);
        let mut line = format!("Speaker{}:", i % 4);
        for _ in 1..k {
            line.push(' ');
            line.push_str(words[rng.random_range(0..words.len())]);
        }
        lines.push(line);
        left -= k;
        i += 1;
    }
    lines.join("\n")
}

async fn cost_reproduction() -> Verdict {
    let text = exact_words(9000);
    let words = word_count(&text);
    let oracle_tokens = (words * 100).div_ceil(75);
    let oracle_usd = oracle_tokens as f64 * 5.0 / 1e6;
    let queries: Vec<String> = (1..=8).map(|i| format!("What was decided about topic number {i}?")).collect();
    let job = MultiQueryJob::from_texts("cost", text.clone(), queries).unwrap();
    let table = PricingTable::builtin();
    let mut ctx = RunContext::new("gpt-4o");
    ctx.params.max_input_tokens = 100_000;

    let result = run_job("cost", &job, &ctx, &MockBackend::wellformed()).await;
    let mut ledger = CostLedger::new();
    ledger.record("cost", "gpt-4o", &result.usage_total, &table).unwrap();
    let eq = single_query_equivalent(&job, &ctx.template, &ctx.params, &table, "gpt-4o", Some(&result.pairs), &WordRatioEstimator)
        .unwrap();
    ledger.add_single_query_equivalent(&eq);

    let multi = ledger.totals().input.as_usd();
    let single = eq.cost.input.as_usd();
    let ratio = ledger.savings_ratio().unwrap_or(0.0);
    let ok = words == 9000
        && estimate_tokens(&text) == 12_000
        && oracle_tokens == 12_000
        && (oracle_usd - 0.06).abs() < 1e-12
        && (0.06..=0.063).contains(&multi)
        && (0.48..=0.504).contains(&single)
        && (7.5..=8.0).contains(&ratio)
        && result.backend_calls == 1;
    check(
        ok,
        format!(
            "transcript {words} words -> {} tokens (oracle {oracle_tokens}); multi {multi:.6} USD in [0.06,0.063], single {single:.6} USD in [0.48,0.504], ratio {ratio:.3} in [7.5,8.0]",
            estimate_tokens(&text)
        ),
    )
}

// 4 -------------------------------------------------------------------------

fn gold_length() -> Verdict {
    let Some(dir) = qmsum_dir() else {
        return Verdict::Blocked("QMSUM_DIR not set; expected mean reference length 64.7 +/- 1.0 words".into());
    };
    let records = match load_records(&dir.join("test.jsonl"), RecordFormat::Qmsum) {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let refs: Vec<usize> = records.iter().filter_map(|r| r.reference_summary.as_deref()).map(word_count).collect();
    let mean = refs.iter().sum::<usize>() as f64 / refs.len().max(1) as f64;
    check((mean - 64.7).abs() <= 1.0, format!("test split mean {mean:.2} words over {} references (want 64.7 +/- 1.0)", refs.len()))
}

// 5 -------------------------------------------------------------------------

fn sequences(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for sym in 0..3u8 {
                let mut t: Vec<u8> = s.clone();
                t.push(sym);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Unigram and bigram occurrence counts over the 3-symbol alphabet.
fn gram_counts(s: &[u8]) -> ([usize; 3], [usize; 9]) {
    let mut uni = [0; 3];
    let mut bi = [0; 9];
    for (i, &x) in s.iter().enumerate() {
        uni[x as usize] += 1;
        if let Some(&y) = s.get(i + 1) {
            bi[3 * x as usize + y as usize] += 1;
        }
    }
    (uni, bi)
}

fn clipped<const K: usize>(a: &[usize; K], b: &[usize; K]) -> usize {
    a.iter().zip(b).map(|(x, y)| x.min(y)).sum()
}

/// Bit-parallel LCS: one bit per position of `a`, per-symbol match masks.
fn symbol_masks(a: &[u8]) -> [u32; 3] {
    let mut m = [0u32; 3];
    for (i, &x) in a.iter().enumerate() {
        m[x as usize] |= 1 << i;
    }
    m
}

fn oracle_lcs(a_len: usize, masks: &[u32; 3], b: &[u8]) -> usize {
    let all = (1u32 << a_len) - 1;
    let mut v = all;
    for &y in b {
        let u = v & masks[y as usize];
        v = (v.wrapping_add(u) | (v - u)) & all;
    }
    a_len - v.count_ones() as usize
}

fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<u8> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
        let mut it = b.iter();
        if sub.iter().all(|x| it.any(|y| y == x)) {
            best = best.max(sub.len());
        }
    }
    best
}

fn prf(overlap: usize, cand: usize, refn: usize) -> (f64, f64, f64) {
    let p = if cand == 0 { 0.0 } else { overlap as f64 / cand as f64 };
    let r = if refn == 0 { 0.0 } else { overlap as f64 / refn as f64 };
    let f = if overlap == 0 { 0.0 } else { 2.0 * overlap as f64 / (cand + refn) as f64 };
    (p, r, f)
}

fn rouge_oracle() -> Verdict {
    let seqs = sequences(8);
    let small: Vec<&Vec<u8>> = seqs.iter().filter(|s| s.len() <= 5).collect();
    for a in &small {
        for b in &small {
            if brute_lcs(a, b) != oracle_lcs(a.len(), &symbol_masks(a), b) {
                return Verdict::Fail(format!("lcs oracle self-check failed on {a:?} {b:?}"));
            }
        }
    }
    let counts: Vec<_> = seqs.iter().map(|s| gram_counts(s)).collect();
    let mut pairs = 0u64;
    let mut worst = 0.0f64;
    for (a, ca) in seqs.iter().zip(&counts) {
        let masks = symbol_masks(a);
        for (b, cb) in seqs.iter().zip(&counts) {
            let got = rouge_counts_tokens(a, b).score();
            let bigrams = |s: &[u8]| s.len().saturating_sub(1);
            let want = [
                prf(clipped(&ca.0, &cb.0), a.len(), b.len()),
                prf(clipped(&ca.1, &cb.1), bigrams(a), bigrams(b)),
                prf(oracle_lcs(a.len(), &masks, b), a.len(), b.len()),
            ];
            for (g, w) in [got.r1, got.r2, got.rl].iter().zip(want) {
                worst = worst.max((g.precision - w.0).abs()).max((g.recall - w.1).abs()).max((g.f1 - w.2).abs());
            }
            pairs += 1;
        }
    }
    check(worst <= 1e-12, format!("{pairs} ordered pairs over {} sequences, max abs error {worst:.1e} (tol 1e-12)", seqs.len()))
}

// 6 -------------------------------------------------------------------------

fn random_string(rng: &mut ChaCha8Rng, max: usize) -> String {
    let len = rng.random_range(0..max);
    (0..len)
        .map(|_| match rng.random_range(0..4) {
            0 => rng.random::<char>(),
            1 => ['"', '{', '}', '[', ']', ':', ',', '\\', '\n', '-', '#'][rng.random_range(0..11)],
            _ => rng.random_range(b'a'..=b'z') as char,
        })
        .collect()
}

fn parser_robustness() -> Verdict {
    let cases = load_all(&bundled_dir()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut panics = 0usize;
    let mut shape_errors = 0usize;
    let inputs = 100_000;
    for i in 0..inputs {
        let case = &cases[i % cases.len()];
        let raw: Vec<u8> = if i % 2 == 0 {
            (0..rng.random_range(0..512)).map(|_| rng.random()).collect()
        } else {
            let mut raw = case.raw_response.clone().into_bytes();
            for _ in 0..rng.random_range(1..16) {
                let at = rng.random_range(0..=raw.len());
                match rng.random_range(0..3) {
                    0 if at < raw.len() => {
                        raw.remove(at);
                    }
                    1 => raw.insert(at, rng.random()),
                    _ => {
                        let end = rng.random_range(at..=raw.len());
                        raw.truncate(end);
                    }
                }
            }
            raw
        };
        let format = if rng.random_bool(0.5) { OutputFormat::Json } else { OutputFormat::Yaml };
        match catch_unwind(AssertUnwindSafe(|| parse_bytes(&raw, &case.queries, format))) {
            Ok(r) if r.pairs.len() == case.queries.len() => {}
            Ok(_) => shape_errors += 1,
            Err(_) => panics += 1,
        }
    }

    let mut not_strict = 0usize;
    let round_trips = 10_000;
    for i in 0..round_trips {
        let n = rng.random_range(0..9);
        let mut texts: Vec<String> = Vec::new();
        while texts.len() < n {
            let q = format!("q{} {}", texts.len(), random_string(&mut rng, 20));
            texts.push(q);
        }
        let queries = Query::list(texts.clone()).unwrap();
        let pairs: Vec<QuerySummaryPair> = queries
            .iter()
            .map(|q| QuerySummaryPair {
                query_index: q.index(),
                query_text: q.text().to_string(),
                summary: random_string(&mut rng, 80),
                match_method: MatchMethod::Exact,
                retried: false,
            })
            .collect();
        let format = if i % 2 == 0 { OutputFormat::Json } else { OutputFormat::Yaml };
        let ok = catch_unwind(AssertUnwindSafe(|| {
            let r = parse(&serialize(&pairs, format), &queries, format);
            r.outcome.grade == ParseGrade::Strict && r.pairs == pairs
        }));
        if !matches!(ok, Ok(true)) {
            not_strict += 1;
        }
    }
    check(
        panics == 0 && shape_errors == 0 && not_strict == 0,
        format!("{inputs} fuzz inputs: {panics} panics, {shape_errors} shape errors; {round_trips} round trips: {not_strict} not strict"),
    )
}

// 7 -------------------------------------------------------------------------

async fn coalescing() -> Verdict {
    let context = "Project Manager: let us settle the remote.\nMarketing: the budget is twelve euros.";
    let run = |n: usize| async move {
        let mock = Arc::new(MockBackend::wellformed());
        let mut ctx = RunContext::new("mock");
        ctx.policy.window_ms = 200;
        let gw = Gateway::new(mock.clone(), ctx);
        let tasks: Vec<_> = (0..n)
            .map(|i| {
                let gw = gw.clone();
                tokio::spawn(async move { (i, gw.submit_single(context, &format!("Caller {i} asks with nonce k{i:02}z?")).await) })
            })
            .collect();
        let mut isolated = true;
        let mut answers = Vec::new();
        for t in tasks {
            let (i, a) = t.await.unwrap();
            let ok = a.as_ref().is_ok_and(|a| {
                a.pair.query_text == format!("Caller {i} asks with nonce k{i:02}z?")
                    && a.pair.summary.contains(&format!("k{i:02}z"))
                    && a.pair.match_method.is_matched()
            });
            isolated &= ok;
            answers.push(a.map(|a| a.pair.summary).unwrap_or_default());
        }
        (mock.calls(), isolated, answers)
    };
    let (calls8, iso8, first) = run(8).await;
    let (_, _, second) = run(8).await;
    let (calls11, iso11, _) = run(11).await;
    check(
        calls8 == 1 && iso8 && calls11 == 2 && iso11 && first == second,
        format!("8 callers -> {calls8} call (isolated {iso8}); 11 callers cap 10 -> {calls11} calls; repeat identical {}", first == second),
    )
}

// 8 -------------------------------------------------------------------------

fn t4_pdf(x: f64) -> f64 {
    0.375 * (1.0 + x * x / 4.0).powf(-2.5)
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn statistics() -> Verdict {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    let b = [0.0; 5];
    let r = paired_ttest(&a, &b).unwrap();
    let oracle_t = 3.0 / (2.5f64.sqrt() / 5f64.sqrt());
    let oracle_p = 1.0 - 2.0 * simpson(t4_pdf, 0.0, oracle_t, 200_000);
    let ok = (r.t - 4.2426).abs() < 1e-3 && (r.t - oracle_t).abs() < 1e-9 && (r.p - oracle_p).abs() < 1e-3 && r.df == 4;
    check(ok, format!("t {:.6} (want 4.2426 +/- 1e-3), p {:.6} vs integrated {oracle_p:.6} (tol 1e-3)", r.t, r.p))
}

// 9 -------------------------------------------------------------------------

fn synthetic_jobs(seed: u64) -> Vec<MultiQueryJob> {
    let text = common::records_jsonl(35, 3..=12, 1500, seed);
    convert(SplitName::Test, &parse_records(&text).unwrap()).unwrap().jobs
}

async fn run_all(jobs: &[MultiQueryJob], ctx: &RunContext, backend: &dyn Backend) -> Vec<mqgate::gateway::JobResult> {
    let mut out = Vec::new();
    for j in jobs {
        out.push(run_job(&j.transcript().id, j, ctx, backend).await);
    }
    out
}

fn eval_jobs(results: &[mqgate::gateway::JobResult], jobs: &[MultiQueryJob]) -> Vec<EvalJob> {
    results
        .iter()
        .zip(jobs)
        .map(|(r, j)| EvalJob {
            job_id: r.job_id.clone(),
            grades: r.primary_grades(),
            pairs: r.pairs.clone(),
            references: j.references().unwrap().to_vec(),
        })
        .collect()
}

async fn replay_determinism() -> Verdict {
    let jobs = synthetic_jobs(91);
    let dir = tempfile::tempdir().unwrap();
    let profile = FailureModeProfile::parse("wellformed:0.6,numbered_no_array:0.1,truncated:0.1,wrong_keys:0.1,hallucination:0.1", 5).unwrap();
    let ctx = RunContext::new("mock");
    let recorder = RecordingBackend::new(MockBackend::new(profile), ReplayStore::open(dir.path()).unwrap());
    let recorded = run_all(&jobs, &ctx, &recorder).await;
    let summary = |results: &[mqgate::gateway::JobResult]| {
        let s = RunSummary::build("run", &eval_jobs(results, &jobs), &EvalConfig::default()).unwrap();
        serde_json::to_vec(&s).unwrap()
    };
    let replay = ReplayBackend::new(ReplayStore::open(dir.path()).unwrap());
    let first = summary(&run_all(&jobs, &ctx, &replay).await);
    let second = summary(&run_all(&jobs, &ctx, &replay).await);
    let original = summary(&recorded);
    check(
        first == second && first == original,
        format!("{} jobs, {} recordings; replay twice bit-identical {}, equal to recorded run {}", jobs.len(), ReplayStore::open(dir.path()).unwrap().len(), first == second, first == original),
    )
}

const PINNED_LENIENT: (usize, usize) = (30, 40);

async fn mock_profile_accuracy() -> Verdict {
    let jobs = synthetic_jobs(2024);
    let profile = FailureModeProfile::parse("wellformed:0.8,hallucination:0.2", 7).unwrap();
    let results = run_all(&jobs, &RunContext::new("mock"), &MockBackend::new(profile)).await;
    let acc = format_accuracy(results.iter().flat_map(|r| r.primary_grades())).unwrap();
    let lenient = (acc.lenient * acc.n as f64).round() as usize;
    check(
        (lenient, acc.n) == PINNED_LENIENT,
        format!("lenient {lenient}/{} = {:.4} (pinned {}/{})", acc.n, acc.lenient, PINNED_LENIENT.0, PINNED_LENIENT.1),
    )
}

fn mean_words(results: &[mqgate::gateway::JobResult]) -> f64 {
    let lens: Vec<usize> = results.iter().flat_map(|r| &r.pairs).filter(|p| !p.summary.is_empty()).map(|p| word_count(&p.summary)).collect();
    lens.iter().sum::<usize>() as f64 / lens.len().max(1) as f64
}

fn directionality() -> Verdict {
    let Some(dir) = std::env::var_os("MQGATE_RECORDED_RUN").map(PathBuf::from) else {
        return Verdict::Blocked("no recorded hosted-model run (set MQGATE_RECORDED_RUN)".into());
    };
    match (load_results(&dir.join("multi.jsonl")), load_results(&dir.join("single.jsonl"))) {
        (Ok(m), Ok(s)) => {
            let (m, s) = (mean_words(&m), mean_words(&s));
            check(m < s, format!("mean summary words multi {m:.1} < single {s:.1}"))
        }
        (Err(e), _) | (_, Err(e)) => Verdict::Fail(e.to_string()),
    }
}

// ---------------------------------------------------------------------------

fn main() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let secs = Duration::from_secs;
    let mut outcomes = Vec::new();
    let mut run = |id: &'static str, name: &'static str, budget: Duration, f: &mut dyn FnMut() -> Verdict| {
        let t = Instant::now();
        let verdict = f();
        outcomes.push(Outcome { id, name, verdict, elapsed: t.elapsed(), budget });
    };
    run("1", "dataset reproduction", secs(10), &mut dataset_reproduction);
    run("2", "fixture suite", secs(1), &mut fixture_suite);
    run("3", "cost reproduction", secs(1), &mut || rt.block_on(cost_reproduction()));
    run("4", "gold length statistic", secs(5), &mut gold_length);
    run("5", "rouge oracle equivalence", secs(60), &mut rouge_oracle);
    run("6", "parser robustness", secs(300), &mut parser_robustness);
    run("7", "coalescing", secs(10), &mut || rt.block_on(coalescing()));
    run("8", "paired t-test", secs(1), &mut statistics);
    run("9a", "replay determinism", secs(60), &mut || rt.block_on(replay_determinism()));
    run("9b", "mock profile accuracy", secs(60), &mut || rt.block_on(mock_profile_accuracy()));
    run("9c", "length directionality", secs(60), &mut directionality);

    let mut failed = 0;
    let mut blocked = 0;
    for o in &outcomes {
        let over = o.elapsed > o.budget;
        let (tag, detail) = match &o.verdict {
            Verdict::Pass(d) if !over => ("PASS", d.clone()),
            Verdict::Pass(d) => {
                failed += 1;
                ("FAIL", format!("{d}; over time budget"))
            }
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d.clone())
            }
            Verdict::Blocked(d) => {
                blocked += 1;
                ("FAIL", format!("input unavailable: {d}"))
            }
        };
        println!(
            "{tag} criterion {:<3} {:<26} {:>8.2}s/{:<4}s  {detail}",
            o.id,
            o.name,
            o.elapsed.as_secs_f64(),
            o.budget.as_secs()
        );
    }
    let passed = outcomes.len() - failed - blocked;
    println!("acceptance: {passed} passed, {failed} failed, {blocked} unavailable");
    if failed > 0 {
        std::process::exit(1);
    }
}
