//! Mapping of arbitrary record field names onto the canonical `query` and
//! `summary` keys.

const QUERY_KEYS: &[&str] = &["query", "question", "q"];
const SUMMARY_KEYS: &[&str] = &["summary", "answer", "response"];

/// A field value as seen by key normalization.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Str(String),
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonicalRecord {
    pub query: String,
    pub summary: String,
    /// True when any field name had to be mapped or inferred.
    pub keys_normalized: bool,
}

fn canonical(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Maps `fields` to a canonical record, or `None` when the record has no
/// string-valued summary-like field.
pub fn normalize_keys(fields: &[(String, FieldValue)]) -> Option<CanonicalRecord> {
    let names: Vec<String> = fields.iter().map(|(k, _)| canonical(k)).collect();
    let summary_at = names.iter().position(|n| SUMMARY_KEYS.contains(&n.as_str()))?;
    let FieldValue::Str(summary) = &fields[summary_at].1 else {
        return None;
    };
    let exact = fields.len() == 2
        && fields.iter().any(|(k, _)| k == "query")
        && fields[summary_at].0 == "summary";

    let query_at = names
        .iter()
        .enumerate()
        .position(|(i, n)| i != summary_at && QUERY_KEYS.contains(&n.as_str()) && matches!(fields[i].1, FieldValue::Str(_)));
    let query = match query_at {
        Some(i) => match &fields[i].1 {
            FieldValue::Str(s) => s.clone(),
            FieldValue::Other => unreachable!(),
        },
        None => {
            let others: Vec<&String> = fields
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != summary_at)
                .filter_map(|(_, (_, v))| match v {
                    FieldValue::Str(s) => Some(s),
                    FieldValue::Other => None,
                })
                .collect();
            let summary_like = names.iter().filter(|n| SUMMARY_KEYS.contains(&n.as_str())).count();
            if summary_like == 1 && others.len() == 1 {
                others[0].clone()
            } else {
                String::new()
            }
        }
    };
    Some(CanonicalRecord { query, summary: summary.clone(), keys_normalized: !exact })
}
