//! Recovery of (query, summary) records from raw model output.
//!
//! A fixed ladder of stages is tried in order and the first stage that
//! yields at least one conforming record decides the grade:
//!
//! | stage (JSON)        | stage (YAML)            | grade    |
//! |---------------------|-------------------------|----------|
//! | `strict`            | `yaml_strict`           | Strict   |
//! | `fenced_block`      | `yaml_fenced`           | Repaired |
//! | `bracket_slice`     | `yaml_list_slice`       | Repaired |
//! | `record_scan`       | `yaml_item_scan`        | Salvaged |
//! | `truncation_repair` | `yaml_truncation_repair`| Salvaged |
//!
//! Strict and repaired stages only accept well-formed arrays whose records
//! have exactly the keys `query` and `summary`. Salvage stages apply the
//! same generic repairs to every response: a lenient object scan, key
//! normalization, and dropping a trailing unterminated record. Recovered
//! records are then aligned to the input queries; queries left over get an
//! empty summary.

mod align;
mod keys;
mod lenient;
mod yaml;

use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use align::{align, jaccard, normalize_query, AlignRecord, FUZZY_THRESHOLD};
pub use keys::{normalize_keys, CanonicalRecord, FieldValue};
pub use lenient::{scan_objects, LooseObject, LooseValue, Scan};

use crate::model::{OutputFormat, Query, QuerySummaryPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseGrade {
    Strict,
    Repaired,
    Salvaged,
    Failed,
}

impl ParseGrade {
    pub fn is_recovered(&self) -> bool {
        !matches!(self, ParseGrade::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Strict,
    FencedBlock,
    BracketSlice,
    RecordScan,
    TruncationRepair,
    YamlStrict,
    YamlFenced,
    YamlListSlice,
    YamlItemScan,
    YamlTruncationRepair,
}

pub const JSON_LADDER: [Stage; 5] =
    [Stage::Strict, Stage::FencedBlock, Stage::BracketSlice, Stage::RecordScan, Stage::TruncationRepair];
pub const YAML_LADDER: [Stage; 5] = [
    Stage::YamlStrict,
    Stage::YamlFenced,
    Stage::YamlListSlice,
    Stage::YamlItemScan,
    Stage::YamlTruncationRepair,
];

impl Stage {
    pub fn grade(&self) -> ParseGrade {
        match self {
            Stage::Strict | Stage::YamlStrict => ParseGrade::Strict,
            Stage::FencedBlock | Stage::BracketSlice | Stage::YamlFenced | Stage::YamlListSlice => ParseGrade::Repaired,
            _ => ParseGrade::Salvaged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOutcome {
    pub grade: ParseGrade,
    pub stages_applied: Vec<Stage>,
    pub truncation_detected: bool,
    pub keys_normalized: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub outcome: ParseOutcome,
    pub pairs: Vec<QuerySummaryPair>,
    /// Records found by the deciding stage before key normalization,
    /// rejection and de-duplication.
    pub raw_record_count: usize,
}

impl ParseReport {
    pub fn matched(&self) -> usize {
        self.pairs.iter().filter(|p| p.match_method.is_matched()).count()
    }
}

static FENCE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"```[A-Za-z0-9_+\-]*[ \t]*\r?\n([\s\S]*?)```").expect("valid regex"));

/// What a stage produced: raw candidate count plus canonical records.
#[derive(Debug, Default)]
struct Yield {
    raw: usize,
    records: Vec<CanonicalRecord>,
    /// Stage accepted a well-formed but empty array.
    empty_array: bool,
}

impl Yield {
    fn succeeded(&self, queries: &[Query]) -> bool {
        !self.records.is_empty() || (self.empty_array && queries.is_empty())
    }
}

fn exact_record(fields: &[(String, FieldValue)]) -> Option<CanonicalRecord> {
    if fields.len() != 2 {
        return None;
    }
    let get = |name: &str| {
        fields.iter().find(|(k, _)| k == name).and_then(|(_, v)| match v {
            FieldValue::Str(s) => Some(s.clone()),
            FieldValue::Other => None,
        })
    };
    Some(CanonicalRecord { query: get("query")?, summary: get("summary")?, keys_normalized: false })
}

/// All-or-nothing: every element must be an exact record.
fn strict_from_lists(lists: Option<Vec<Vec<(String, FieldValue)>>>) -> Option<Yield> {
    let lists = lists?;
    let records: Option<Vec<_>> = lists.iter().map(|f| exact_record(f)).collect();
    let records = records?;
    Some(Yield { raw: lists.len(), empty_array: records.is_empty(), records })
}

fn json_object_fields(v: &Value) -> Option<Vec<(String, FieldValue)>> {
    let obj = v.as_object()?;
    Some(
        obj.iter()
            .map(|(k, v)| {
                let value = match v {
                    Value::String(s) => FieldValue::Str(s.clone()),
                    _ => FieldValue::Other,
                };
                (k.clone(), value)
            })
            .collect(),
    )
}

fn json_array_fields(text: &str) -> Option<Vec<Vec<(String, FieldValue)>>> {
    let value: Value = serde_json::from_str(text.trim()).ok()?;
    value.as_array()?.iter().map(json_object_fields).collect()
}

fn json_strict(text: &str) -> Option<Yield> {
    strict_from_lists(json_array_fields(text))
}

fn yaml_strict(text: &str) -> Option<Yield> {
    strict_from_lists(yaml::document_records(text))
}

fn fenced_blocks(text: &str) -> impl Iterator<Item = &str> {
    FENCE.captures_iter(text).filter_map(|c| c.get(1)).map(|m| m.as_str())
}

fn canonicalize<I>(candidates: I) -> Yield
where
    I: IntoIterator<Item = Vec<(String, FieldValue)>>,
{
    let mut y = Yield::default();
    for fields in candidates {
        y.raw += 1;
        if let Some(rec) = normalize_keys(&fields) {
            y.records.push(rec);
        }
    }
    y
}

fn loose_fields(obj: &LooseObject) -> Vec<(String, FieldValue)> {
    obj.fields
        .iter()
        .map(|(k, v)| {
            let value = match v {
                LooseValue::Str(s) => FieldValue::Str(s.clone()),
                _ => FieldValue::Other,
            };
            (k.clone(), value)
        })
        .collect()
}

fn json_bracket_slice(text: &str) -> Option<Yield> {
    let (start, end) = lenient::balanced_bracket_slice(text)?;
    // A slice that leaves record-like content outside it is not the answer.
    if text[..start].contains('{') || text[end..].contains('{') {
        return None;
    }
    json_strict(&text[start..end])
}

/// Drops the unterminated record starting at `tail`, closes the array, and
/// re-reads what remains.
fn json_truncation_repair(text: &str, tail: usize) -> Yield {
    let cut = text[..tail].trim_end().trim_end_matches(',').trim_end();
    if let Some(open) = cut.find('[') {
        let closed = format!("{}]", &cut[open..]);
        if let Some(lists) = json_array_fields(&closed) {
            let y = canonicalize(lists);
            if !y.records.is_empty() {
                return y;
            }
        }
    }
    canonicalize(scan_objects(cut).objects.iter().map(loose_fields))
}

struct Ladder<'a> {
    queries: &'a [Query],
    stages: Vec<Stage>,
    truncated: bool,
}

impl Ladder<'_> {
    fn attempt(&mut self, stage: Stage, y: Option<Yield>) -> Option<(Stage, Yield)> {
        self.stages.push(stage);
        y.filter(|y| y.succeeded(self.queries)).map(|y| (stage, y))
    }
}

fn run_json(text: &str, ladder: &mut Ladder) -> (Option<(Stage, Yield)>, usize) {
    if let Some(hit) = ladder.attempt(Stage::Strict, json_strict(text)) {
        return (Some(hit), 0);
    }
    let fenced = fenced_blocks(text).find_map(|b| json_strict(b).filter(|y| y.succeeded(ladder.queries)));
    if let Some(hit) = ladder.attempt(Stage::FencedBlock, fenced) {
        return (Some(hit), 0);
    }
    if let Some(hit) = ladder.attempt(Stage::BracketSlice, json_bracket_slice(text)) {
        return (Some(hit), 0);
    }
    let scan = scan_objects(text);
    let scanned = canonicalize(scan.objects.iter().map(loose_fields));
    let raw = scanned.raw;
    if scan.open_tail.is_none() {
        if let Some(hit) = ladder.attempt(Stage::RecordScan, Some(scanned)) {
            return (Some(hit), raw);
        }
        ladder.stages.push(Stage::TruncationRepair);
        return (None, raw);
    }
    ladder.stages.push(Stage::RecordScan);
    ladder.truncated = true;
    let tail = scan.open_tail.expect("checked");
    let repaired = json_truncation_repair(text, tail);
    let raw = raw.max(repaired.raw);
    (ladder.attempt(Stage::TruncationRepair, Some(repaired)), raw)
}

fn run_yaml(text: &str, ladder: &mut Ladder) -> (Option<(Stage, Yield)>, usize) {
    if let Some(hit) = ladder.attempt(Stage::YamlStrict, yaml_strict(text)) {
        return (Some(hit), 0);
    }
    let fenced = fenced_blocks(text).find_map(|b| yaml_strict(b).filter(|y| y.succeeded(ladder.queries)));
    if let Some(hit) = ladder.attempt(Stage::YamlFenced, fenced) {
        return (Some(hit), 0);
    }
    let sliced = yaml::list_slice(text).and_then(|s| yaml_strict(&s));
    if let Some(hit) = ladder.attempt(Stage::YamlListSlice, sliced) {
        return (Some(hit), 0);
    }

    // Item scan: YAML items first, JSON-style flow records otherwise.
    let items = yaml::split_items(text);
    let mut parsed: Vec<Option<Vec<(String, FieldValue)>>> = items.iter().map(|i| yaml::item_fields(i)).collect();
    let mut open_tail = false;
    if items.is_empty() {
        let scan = scan_objects(text);
        open_tail = scan.open_tail.is_some();
        parsed = scan.objects.iter().map(|o| Some(loose_fields(o))).collect();
    } else if let Some(last) = parsed.last() {
        // A final item that does not form a record is a cut-off answer.
        let complete = last.as_ref().and_then(|f| normalize_keys(f)).is_some();
        if !complete {
            open_tail = true;
            parsed.pop();
        }
    }
    let raw = parsed.len() + usize::from(open_tail);
    let scanned = canonicalize(parsed.into_iter().flatten());
    if !open_tail {
        if let Some(hit) = ladder.attempt(Stage::YamlItemScan, Some(scanned)) {
            return (Some(hit), raw);
        }
        ladder.stages.push(Stage::YamlTruncationRepair);
        return (None, raw);
    }
    ladder.stages.push(Stage::YamlItemScan);
    ladder.truncated = true;
    (ladder.attempt(Stage::YamlTruncationRepair, Some(scanned)), raw)
}

/// Parses raw response bytes; invalid UTF-8 is replaced.
pub fn parse_bytes(raw: &[u8], queries: &[Query], format: OutputFormat) -> ParseReport {
    parse(&String::from_utf8_lossy(raw), queries, format)
}

pub fn parse(raw: &str, queries: &[Query], format: OutputFormat) -> ParseReport {
    let mut ladder = Ladder { queries, stages: Vec::new(), truncated: false };
    let (hit, scan_raw) = match format {
        OutputFormat::Json => run_json(raw, &mut ladder),
        OutputFormat::Yaml => run_yaml(raw, &mut ladder),
    };
    let Some((stage, y)) = hit else {
        return ParseReport {
            outcome: ParseOutcome {
                grade: ParseGrade::Failed,
                stages_applied: ladder.stages,
                truncation_detected: ladder.truncated,
                keys_normalized: false,
            },
            pairs: queries.iter().map(QuerySummaryPair::unmatched).collect(),
            raw_record_count: scan_raw,
        };
    };

    // First occurrence of a query wins.
    let mut seen = HashSet::new();
    let kept: Vec<CanonicalRecord> = y
        .records
        .into_iter()
        .filter(|r| r.query.is_empty() || seen.insert(r.query.clone()))
        .collect();
    let keys_normalized = kept.iter().any(|r| r.keys_normalized);
    let aligned: Vec<AlignRecord> =
        kept.into_iter().map(|r| AlignRecord { query: r.query, summary: r.summary }).collect();
    ParseReport {
        outcome: ParseOutcome {
            grade: stage.grade(),
            stages_applied: ladder.stages,
            truncation_detected: ladder.truncated,
            keys_normalized,
        },
        pairs: align(&aligned, queries),
        raw_record_count: y.raw,
    }
}

#[derive(Serialize)]
struct Record<'a> {
    query: &'a str,
    summary: &'a str,
}

/// Canonical well-formed rendering of `pairs` in `format`.
pub fn serialize(pairs: &[QuerySummaryPair], format: OutputFormat) -> String {
    let records: Vec<Record> =
        pairs.iter().map(|p| Record { query: &p.query_text, summary: &p.summary }).collect();
    match format {
        OutputFormat::Json => serde_json::to_string_pretty(&records).expect("records serialize"),
        OutputFormat::Yaml => serde_yaml::to_string(&records).expect("records serialize"),
    }
}
