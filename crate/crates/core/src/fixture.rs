//! Declarative parser fixtures: a directory holding `raw_response.txt`,
//! `queries.txt` (one query per line) and `expected_report.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::model::{MatchMethod, OutputFormat, Query};
use crate::parse::{parse, ParseGrade, ParseReport};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Deserialize)]
pub struct ExpectedPair {
    pub match_method: MatchMethod,
    #[serde(default)]
    pub summary_prefix: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ExpectedReport {
    pub grade: ParseGrade,
    #[serde(default)]
    pub truncation_detected: bool,
    #[serde(default)]
    pub keys_normalized: bool,
    pub raw_record_count: Option<usize>,
    pub matched: usize,
    #[serde(default)]
    pub format: Option<OutputFormat>,
    #[serde(default)]
    pub pairs: Vec<ExpectedPair>,
}

#[derive(Debug, Clone)]
pub struct FixtureCase {
    pub name: String,
    pub raw_response: String,
    pub queries: Vec<Query>,
    pub expected: ExpectedReport,
}

fn read(path: &Path) -> Result<String, FixtureError> {
    fs::read_to_string(path).map_err(|source| FixtureError::Io { path: path.to_path_buf(), source })
}

impl FixtureCase {
    pub fn load(dir: &Path) -> Result<Self, FixtureError> {
        let invalid = |message: String| FixtureError::Invalid { path: dir.to_path_buf(), message };
        let raw_response = read(&dir.join("raw_response.txt"))?;
        let queries_text = read(&dir.join("queries.txt"))?;
        let queries = Query::list(queries_text.lines().filter(|l| !l.trim().is_empty()))
            .map_err(|e| invalid(e.to_string()))?;
        let expected: ExpectedReport =
            toml::from_str(&read(&dir.join("expected_report.toml"))?).map_err(|e| invalid(e.to_string()))?;
        if !expected.pairs.is_empty() && expected.pairs.len() != queries.len() {
            return Err(invalid(format!("{} expected pairs for {} queries", expected.pairs.len(), queries.len())));
        }
        let name = dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        Ok(FixtureCase { name, raw_response, queries, expected })
    }

    pub fn format(&self) -> OutputFormat {
        self.expected.format.unwrap_or_default()
    }

    pub fn run(&self) -> ParseReport {
        parse(&self.raw_response, &self.queries, self.format())
    }

    /// Differences between `report` and the expectation; empty when it conforms.
    pub fn check(&self, report: &ParseReport) -> Vec<String> {
        let e = &self.expected;
        let o = &report.outcome;
        let mut diffs = Vec::new();
        if o.grade != e.grade {
            diffs.push(format!("grade {:?}, expected {:?}", o.grade, e.grade));
        }
        if o.truncation_detected != e.truncation_detected {
            diffs.push(format!("truncation_detected {}", o.truncation_detected));
        }
        if o.keys_normalized != e.keys_normalized {
            diffs.push(format!("keys_normalized {}", o.keys_normalized));
        }
        if let Some(raw) = e.raw_record_count {
            if report.raw_record_count != raw {
                diffs.push(format!("raw_record_count {}, expected {raw}", report.raw_record_count));
            }
        }
        if report.matched() != e.matched {
            diffs.push(format!("matched {}, expected {}", report.matched(), e.matched));
        }
        for (i, (got, want)) in report.pairs.iter().zip(&e.pairs).enumerate() {
            if got.match_method != want.match_method {
                diffs.push(format!("pair {}: {:?}, expected {:?}", i + 1, got.match_method, want.match_method));
            }
            if !got.summary.starts_with(&want.summary_prefix) || (want.summary_prefix.is_empty() && !got.summary.is_empty()) {
                diffs.push(format!("pair {}: summary {:?}", i + 1, truncate(&got.summary, 40)));
            }
        }
        diffs
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

/// Every fixture directory under `root`, sorted by name.
pub fn load_all(root: &Path) -> Result<Vec<FixtureCase>, FixtureError> {
    let entries = fs::read_dir(root).map_err(|source| FixtureError::Io { path: root.to_path_buf(), source })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("raw_response.txt").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| FixtureCase::load(d)).collect()
}

/// Fixture directory shipped with this crate.
pub fn bundled_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("responses")
}
