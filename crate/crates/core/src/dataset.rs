//! Conversion of single-query (query, transcript, reference) records into
//! multi-query jobs, one per distinct transcript.
//!
//! Two input layouts are understood:
//!
//! * `records`: line-delimited objects with `transcript_id`, `transcript_text`,
//!   `query_text` and (optionally) `reference_summary`.
//! * `qmsum`: the upstream QMSum jsonl layout, one meeting per line with
//!   `meeting_transcripts`, `general_query_list` and `specific_query_list`.
//!   Each meeting is flattened to records (general queries first, then
//!   specific ones, in file order) before grouping.
//!
//! Jobs are written as line-delimited objects:
//! `{"transcript":{"id":..,"text":..},"queries":[..],"references":[..]}`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{ModelError, MultiQueryJob, OutputFormat, Query, Transcript};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: missing or invalid field `{field}`")]
    Schema { line: usize, field: String },
    #[error("transcript `{0}` appears with two different texts")]
    ConflictingTranscript(String),
    #[error("record {index} has an empty `{field}`")]
    EmptyRecordField { index: usize, field: &'static str },
    #[error("transcript `{0}` has references for some queries but not others")]
    PartialReferences(String),
    #[error("transcripts `{0}` and `{1}` have identical normalized text")]
    DuplicateContext(String, String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingleQueryRecord {
    pub transcript_id: String,
    pub transcript_text: String,
    pub query_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_summary: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(SplitName::Train),
            "validation" | "val" | "dev" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub jobs: Vec<MultiQueryJob>,
}

impl DatasetSplit {
    pub fn query_count(&self) -> usize {
        self.jobs.iter().map(|j| j.queries().len()).sum()
    }

    /// Number of jobs keyed by their query count.
    pub fn query_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for job in &self.jobs {
            *h.entry(job.queries().len()).or_insert(0) += 1;
        }
        h
    }

    /// Expands every job back into one record per query.
    pub fn expand(&self) -> Vec<SingleQueryRecord> {
        self.jobs
            .iter()
            .flat_map(|job| {
                job.queries().iter().map(move |q| SingleQueryRecord {
                    transcript_id: job.transcript().id.clone(),
                    transcript_text: job.transcript().text.clone(),
                    query_text: q.text().to_string(),
                    reference_summary: job.references().map(|r| r[q.index() - 1].clone()),
                })
            })
            .collect()
    }
}

/// Input layout for [`load_records`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecordFormat {
    #[default]
    Records,
    Qmsum,
}

impl FromStr for RecordFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "records" | "jsonl" => Ok(RecordFormat::Records),
            "qmsum" => Ok(RecordFormat::Qmsum),
            other => Err(format!("unknown record format `{other}` (expected records or qmsum)")),
        }
    }
}

/// Groups records by transcript. Query order is first-appearance order;
/// duplicate (transcript, query) pairs are kept.
pub fn convert(name: SplitName, records: &[SingleQueryRecord]) -> Result<DatasetSplit, DatasetError> {
    struct Group<'a> {
        text: &'a str,
        queries: Vec<&'a str>,
        references: Vec<Option<&'a str>>,
    }

    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Group> = HashMap::new();
    for (index, r) in records.iter().enumerate() {
        for (field, value) in [
            ("transcript_id", r.transcript_id.as_str()),
            ("transcript_text", r.transcript_text.as_str()),
            ("query_text", r.query_text.as_str()),
        ] {
            if value.trim().is_empty() {
                return Err(DatasetError::EmptyRecordField { index, field });
            }
        }
        if matches!(&r.reference_summary, Some(s) if s.trim().is_empty()) {
            return Err(DatasetError::EmptyRecordField { index, field: "reference_summary" });
        }
        let group = groups.entry(r.transcript_id.as_str()).or_insert_with(|| {
            order.push(r.transcript_id.as_str());
            Group { text: &r.transcript_text, queries: Vec::new(), references: Vec::new() }
        });
        if group.text != r.transcript_text {
            return Err(DatasetError::ConflictingTranscript(r.transcript_id.clone()));
        }
        group.queries.push(&r.query_text);
        group.references.push(r.reference_summary.as_deref());
    }

    let mut seen = HashMap::new();
    let mut jobs = Vec::with_capacity(order.len());
    for id in order {
        let group = &groups[id];
        let transcript = Transcript::new(id, group.text)?;
        if let Some(other) = seen.insert(transcript.fingerprint(), id) {
            return Err(DatasetError::DuplicateContext(other.to_string(), id.to_string()));
        }
        let references = if group.references.iter().all(Option::is_some) {
            Some(group.references.iter().map(|r| r.unwrap().to_string()).collect())
        } else if group.references.iter().all(Option::is_none) {
            None
        } else {
            return Err(DatasetError::PartialReferences(id.to_string()));
        };
        let queries = Query::list(group.queries.iter().copied())?;
        jobs.push(MultiQueryJob::new(transcript, queries, references, OutputFormat::Json)?);
    }
    Ok(DatasetSplit { name, jobs })
}

pub fn load_records(path: &Path, format: RecordFormat) -> Result<Vec<SingleQueryRecord>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "meeting".to_string());
    match format {
        RecordFormat::Records => parse_records(&text),
        RecordFormat::Qmsum => parse_qmsum(&text, &stem),
    }
}

fn json_lines(text: &str) -> impl Iterator<Item = (usize, Result<Value, DatasetError>)> + '_ {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let line = i + 1;
            let parsed = serde_json::from_str::<Value>(l)
                .map_err(|_| DatasetError::Schema { line, field: "<json>".into() });
            (line, parsed)
        })
}

fn str_field(obj: &Value, line: usize, field: &str) -> Result<String, DatasetError> {
    obj.get(field)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| DatasetError::Schema { line, field: field.to_string() })
}

/// Parses the `records` layout from in-memory text.
pub fn parse_records(text: &str) -> Result<Vec<SingleQueryRecord>, DatasetError> {
    let mut out = Vec::new();
    for (line, value) in json_lines(text) {
        let obj = value?;
        let reference_summary = match obj.get("reference_summary") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(DatasetError::Schema { line, field: "reference_summary".into() }),
        };
        out.push(SingleQueryRecord {
            transcript_id: str_field(&obj, line, "transcript_id")?,
            transcript_text: str_field(&obj, line, "transcript_text")?,
            query_text: str_field(&obj, line, "query_text")?,
            reference_summary,
        });
    }
    Ok(out)
}

/// Flattens the QMSum meeting layout. Transcript ids are `<stem>-<line>`.
pub fn parse_qmsum(text: &str, stem: &str) -> Result<Vec<SingleQueryRecord>, DatasetError> {
    let mut out = Vec::new();
    for (line, value) in json_lines(text) {
        let meeting = value?;
        let turns = meeting
            .get("meeting_transcripts")
            .and_then(Value::as_array)
            .ok_or_else(|| DatasetError::Schema { line, field: "meeting_transcripts".into() })?;
        let mut transcript = String::new();
        for turn in turns {
            let speaker = str_field(turn, line, "speaker")?;
            let content = str_field(turn, line, "content")?;
            if !transcript.is_empty() {
                transcript.push('\n');
            }
            transcript.push_str(&speaker);
            transcript.push_str(": ");
            transcript.push_str(&content);
        }
        let id = format!("{stem}-{line:04}");
        for list in ["general_query_list", "specific_query_list"] {
            let Some(items) = meeting.get(list) else { continue };
            let items = items
                .as_array()
                .ok_or_else(|| DatasetError::Schema { line, field: list.to_string() })?;
            for item in items {
                out.push(SingleQueryRecord {
                    transcript_id: id.clone(),
                    transcript_text: transcript.clone(),
                    query_text: str_field(item, line, "query")?,
                    reference_summary: Some(str_field(item, line, "answer")?),
                });
            }
        }
    }
    Ok(out)
}

/// Serialized form of a [`MultiQueryJob`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub transcript: Transcript,
    pub queries: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "is_json")]
    pub format: OutputFormat,
}

fn is_json(f: &OutputFormat) -> bool {
    *f == OutputFormat::Json
}

impl From<&MultiQueryJob> for JobRecord {
    fn from(job: &MultiQueryJob) -> Self {
        JobRecord {
            transcript: job.transcript().clone(),
            queries: job.queries().iter().map(|q| q.text().to_string()).collect(),
            references: job.references().map(<[String]>::to_vec),
            format: job.output_format(),
        }
    }
}

impl TryFrom<JobRecord> for MultiQueryJob {
    type Error = ModelError;

    fn try_from(r: JobRecord) -> Result<Self, Self::Error> {
        MultiQueryJob::new(r.transcript, Query::list(r.queries)?, r.references, r.format)
    }
}

pub fn jobs_to_jsonl(jobs: &[MultiQueryJob]) -> String {
    let mut out = String::new();
    for job in jobs {
        out.push_str(&serde_json::to_string(&JobRecord::from(job)).expect("job serializes"));
        out.push('\n');
    }
    out
}

pub fn jobs_from_jsonl(text: &str) -> Result<Vec<MultiQueryJob>, DatasetError> {
    let mut jobs = Vec::new();
    for (i, l) in text.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        let record: JobRecord = serde_json::from_str(l)
            .map_err(|e| DatasetError::Schema { line: i + 1, field: e.to_string() })?;
        jobs.push(MultiQueryJob::try_from(record)?);
    }
    Ok(jobs)
}

pub fn load_jobs(path: &Path) -> Result<Vec<MultiQueryJob>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    jobs_from_jsonl(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, text: &str, q: &str, r: &str) -> SingleQueryRecord {
        SingleQueryRecord {
            transcript_id: id.into(),
            transcript_text: text.into(),
            query_text: q.into(),
            reference_summary: Some(r.into()),
        }
    }

    #[test]
    fn three_records_one_transcript() {
        let records = vec![
            rec("m1", "A: hi", "q1", "r1"),
            rec("m1", "A: hi", "q2", "r2"),
            rec("m1", "A: hi", "q3", "r3"),
        ];
        let split = convert(SplitName::Train, &records).unwrap();
        assert_eq!(split.jobs.len(), 1);
        let job = &split.jobs[0];
        let qs: Vec<_> = job.queries().iter().map(|q| q.text()).collect();
        assert_eq!(qs, ["q1", "q2", "q3"]);
        assert_eq!(job.references().unwrap(), ["r1", "r2", "r3"]);
    }

    #[test]
    fn first_appearance_order_and_duplicates_kept() {
        let records = vec![
            rec("b", "B text", "x", "1"),
            rec("a", "A text", "y", "2"),
            rec("b", "B text", "x", "3"),
        ];
        let split = convert(SplitName::Test, &records).unwrap();
        assert_eq!(split.jobs[0].transcript().id, "b");
        assert_eq!(split.jobs[0].queries().len(), 2);
        assert_eq!(split.query_count(), 3);
        let mut back = split.expand();
        let mut orig = records.clone();
        back.sort_by(|a, b| (&a.transcript_id, &a.reference_summary).cmp(&(&b.transcript_id, &b.reference_summary)));
        orig.sort_by(|a, b| (&a.transcript_id, &a.reference_summary).cmp(&(&b.transcript_id, &b.reference_summary)));
        assert_eq!(back, orig);
    }

    #[test]
    fn conflicts_and_empty_fields() {
        let records = vec![rec("a", "one", "q", "r"), rec("a", "two", "q", "r")];
        assert!(matches!(convert(SplitName::Train, &records), Err(DatasetError::ConflictingTranscript(id)) if id == "a"));
        let records = vec![rec("a", "one", " ", "r")];
        assert!(matches!(
            convert(SplitName::Train, &records),
            Err(DatasetError::EmptyRecordField { index: 0, field: "query_text" })
        ));
        let records = vec![rec("a", "same  text", "q", "r"), rec("b", "same text", "q", "r")];
        assert!(matches!(convert(SplitName::Train, &records), Err(DatasetError::DuplicateContext(..))));
    }

    #[test]
    fn references_are_optional_but_not_partial() {
        let mut a = rec("a", "t", "q1", "r");
        a.reference_summary = None;
        let mut b = a.clone();
        b.query_text = "q2".into();
        let split = convert(SplitName::Test, &[a.clone(), b]).unwrap();
        assert!(split.jobs[0].references().is_none());
        let c = rec("a", "t", "q3", "r");
        assert!(matches!(convert(SplitName::Test, &[a, c]), Err(DatasetError::PartialReferences(_))));
    }

    #[test]
    fn schema_error_reports_line_and_field() {
        let mut text = String::new();
        for i in 0..4 {
            text.push_str(&format!(
                "{{\"transcript_id\":\"t\",\"transcript_text\":\"x\",\"query_text\":\"q{i}\",\"reference_summary\":\"r\"}}\n"
            ));
        }
        text.push_str("{\"transcript_id\":\"t\",\"transcript_text\":\"x\",\"reference_summary\":\"r\"}\n");
        match parse_records(&text) {
            Err(DatasetError::Schema { line, field }) => {
                assert_eq!(line, 5);
                assert_eq!(field, "query_text");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(parse_records(&text.lines().take(2).collect::<Vec<_>>().join("\n")).unwrap().len(), 2);
    }

    #[test]
    fn qmsum_layout_flattens_general_then_specific() {
        let line = serde_json::json!({
            "topic_list": [],
            "general_query_list": [{"query": "Summarize the meeting", "answer": "g"}],
            "specific_query_list": [
                {"query": "What about A?", "answer": "a", "relevant_text_span": [["0", "1"]]},
                {"query": "What about B?", "answer": "b", "relevant_text_span": [["1", "2"]]}
            ],
            "meeting_transcripts": [
                {"speaker": "PM", "content": "Okay let's start."},
                {"speaker": "UI", "content": "Sure."}
            ]
        });
        let records = parse_qmsum(&format!("{line}\n"), "test").unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].transcript_id, "test-0001");
        assert_eq!(records[0].transcript_text, "PM: Okay let's start.\nUI: Sure.");
        assert_eq!(records[1].query_text, "What about A?");
        let split = convert(SplitName::Test, &records).unwrap();
        assert_eq!(split.jobs.len(), 1);
        assert_eq!(split.query_histogram().get(&3), Some(&1));
    }

    #[test]
    fn job_records_round_trip() {
        let job = MultiQueryJob::from_texts("t", "some text", ["a", "b"])
            .unwrap()
            .with_references(Some(vec!["x".into(), "y".into()]))
            .unwrap();
        let text = jobs_to_jsonl(std::slice::from_ref(&job));
        assert!(text.starts_with("{\"transcript\":{\"id\":\"t\",\"text\":\"some text\"},\"queries\":[\"a\",\"b\"]"));
        assert_eq!(jobs_from_jsonl(&text).unwrap(), vec![job]);
    }
}
