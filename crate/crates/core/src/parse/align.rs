//! One-to-one alignment of recovered records to the input queries.
//!
//! Tiers run in order, each only over what earlier tiers left unmatched:
//! exact byte equality, normalized equality, token-set Jaccard >= 0.6
//! (best pairs first), then position when the record count equals the query
//! count. Every record is consumed at most once.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;

use crate::model::{MatchMethod, Query, QuerySummaryPair};

pub const FUZZY_THRESHOLD: f64 = 0.6;

static ENUMERATION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*(?:(?:q|query|question)\s*#?\d{1,3}\s*[.):\-]?\s*|#\d{1,3}\s*[.):\-]?\s*|\d{1,3}\s*[.):\-]\s+)").expect("valid regex")
});

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignRecord {
    pub query: String,
    pub summary: String,
}

/// Lowercase, drop a leading enumeration such as `1.` or `#2`, remove
/// punctuation, collapse whitespace.
pub fn normalize_query(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped = ENUMERATION.replace(&lowered, "");
    stripped
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn word_set(normalized: &str) -> BTreeSet<&str> {
    normalized.split_whitespace().collect()
}

pub fn jaccard(a: &str, b: &str) -> f64 {
    let (a, b) = (word_set(a), word_set(b));
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

pub fn align(records: &[AlignRecord], queries: &[Query]) -> Vec<QuerySummaryPair> {
    let mut assigned: Vec<Option<(usize, MatchMethod)>> = vec![None; queries.len()];
    let mut used = vec![false; records.len()];

    for (qi, q) in queries.iter().enumerate() {
        if let Some(ri) = (0..records.len()).find(|&ri| !used[ri] && records[ri].query == q.text()) {
            used[ri] = true;
            assigned[qi] = Some((ri, MatchMethod::Exact));
        }
    }

    let norm_q: Vec<String> = queries.iter().map(|q| normalize_query(q.text())).collect();
    let norm_r: Vec<String> = records.iter().map(|r| normalize_query(&r.query)).collect();
    for qi in 0..queries.len() {
        if assigned[qi].is_some() || norm_q[qi].is_empty() {
            continue;
        }
        if let Some(ri) = (0..records.len()).find(|&ri| !used[ri] && norm_r[ri] == norm_q[qi]) {
            used[ri] = true;
            assigned[qi] = Some((ri, MatchMethod::Normalized));
        }
    }

    let mut candidates = Vec::new();
    for qi in (0..queries.len()).filter(|&qi| assigned[qi].is_none()) {
        for ri in (0..records.len()).filter(|&ri| !used[ri]) {
            let score = jaccard(&norm_q[qi], &norm_r[ri]);
            if score >= FUZZY_THRESHOLD {
                candidates.push((score, qi, ri));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (_, qi, ri) in candidates {
        if assigned[qi].is_none() && !used[ri] {
            used[ri] = true;
            assigned[qi] = Some((ri, MatchMethod::Fuzzy));
        }
    }

    if records.len() == queries.len() {
        for qi in 0..queries.len() {
            if assigned[qi].is_none() && !used[qi] {
                used[qi] = true;
                assigned[qi] = Some((qi, MatchMethod::Positional));
            }
        }
    }

    queries
        .iter()
        .zip(assigned)
        .map(|(q, a)| match a {
            Some((ri, method)) => QuerySummaryPair {
                query_index: q.index(),
                query_text: q.text().to_string(),
                summary: records[ri].summary.clone(),
                match_method: method,
                retried: false,
            },
            None => QuerySummaryPair::unmatched(q),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(q: &str, s: &str) -> AlignRecord {
        AlignRecord { query: q.into(), summary: s.into() }
    }

    #[test]
    fn normalization_strips_enumeration_and_punctuation() {
        assert_eq!(normalize_query("1. Summarize the meeting"), "summarize the meeting");
        assert_eq!(normalize_query("#2  What's  up?"), "what s up");
        assert_eq!(normalize_query("Q3: Anything?"), "anything");
        assert_eq!(normalize_query("2020 budget review"), "2020 budget review");
    }

    #[test]
    fn normalized_tier() {
        let qs = Query::list(["Summarize the meeting"]).unwrap();
        let pairs = align(&[rec("1. Summarize the meeting", "S")], &qs);
        assert_eq!(pairs[0].match_method, MatchMethod::Normalized);
        assert_eq!(pairs[0].summary, "S");
    }

    #[test]
    fn fuzzy_tier_threshold() {
        assert!(jaccard("summarize the meeting", "summarize the whole meeting") >= FUZZY_THRESHOLD);
        let qs = Query::list(["Summarize the meeting", "What about the budget?"]).unwrap();
        let pairs = align(&[rec("Summarize the whole meeting", "S"), rec("x", "y"), rec("z", "w")], &qs);
        assert_eq!(pairs[0].match_method, MatchMethod::Fuzzy);
        assert_eq!(pairs[1].match_method, MatchMethod::Unmatched);
        assert_eq!(pairs[1].summary, "");
    }

    #[test]
    fn positional_when_counts_agree() {
        let qs = Query::list(["a b c", "d e f", "g h i", "j k l", "m n o"]).unwrap();
        let recs: Vec<_> = (0..5).map(|i| rec(&format!("paraphrase {i}"), &format!("s{i}"))).collect();
        let pairs = align(&recs, &qs);
        for (i, p) in pairs.iter().enumerate() {
            assert_eq!(p.match_method, MatchMethod::Positional);
            assert_eq!(p.summary, format!("s{i}"));
        }
    }

    #[test]
    fn each_record_used_once() {
        let qs = Query::list(["same", "same"]).unwrap();
        let pairs = align(&[rec("same", "first")], &qs);
        assert_eq!(pairs[0].summary, "first");
        assert_eq!(pairs[1].match_method, MatchMethod::Unmatched);
    }
}
