//! YAML-mode record recovery: strict document parse, list slicing, and a
//! per-item scan that tolerates invalid YAML inside individual items.

use std::sync::LazyLock;

use regex::Regex;
use serde_yaml::Value;

use super::keys::FieldValue;

static DASH_ITEM: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(\s*)-(\s|$)").expect("valid regex"));
static QUERY_KEY_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?i)^["']?(query|question|q)["']?\s*:"#).expect("valid regex"));
static KEY_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"^(\s*)["']?([A-Za-z_.][A-Za-z0-9_ .\-]*?)["']?\s*:(?:\s+(.*))?$"#).expect("valid regex")
});

pub type Fields = Vec<(String, FieldValue)>;

fn key_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn mapping_fields(v: &Value) -> Option<Fields> {
    let map = v.as_mapping()?;
    map.iter()
        .map(|(k, v)| {
            let key = key_string(k)?;
            let value = match v {
                Value::String(s) => FieldValue::Str(s.clone()),
                _ => FieldValue::Other,
            };
            Some((key, value))
        })
        .collect()
}

/// Parses a whole document as a list of mappings (or a single mapping).
/// Returns `None` when the text is not YAML or not of that shape.
pub fn document_records(text: &str) -> Option<Vec<Fields>> {
    let value: Value = serde_yaml::from_str(text).ok()?;
    match &value {
        Value::Sequence(items) => items.iter().map(mapping_fields).collect(),
        Value::Mapping(_) => Some(vec![mapping_fields(&value)?]),
        _ => None,
    }
}

fn indent_of(line: &str) -> usize {
    line.len() - line.trim_start().len()
}

/// Contiguous block of list lines starting at the first top-level dash item.
pub fn list_slice(text: &str) -> Option<String> {
    let lines: Vec<&str> = text.lines().collect();
    let first = lines.iter().position(|l| DASH_ITEM.is_match(l))?;
    let base = indent_of(lines[first]);
    let mut out = Vec::new();
    for line in &lines[first..] {
        let continuation = line.trim().is_empty() || indent_of(line) > base;
        let item = indent_of(line) == base && DASH_ITEM.is_match(line);
        if !(continuation || item) {
            break;
        }
        out.push(*line);
    }
    Some(out.join("\n"))
}

/// Splits text into candidate record items: top-level dash items when there
/// are any, otherwise blocks that begin with a query-like key at column 0.
pub fn split_items(text: &str) -> Vec<String> {
    let lines: Vec<&str> = text.lines().collect();
    let base = lines
        .iter()
        .filter(|l| DASH_ITEM.is_match(l))
        .map(|l| indent_of(l))
        .min();
    let mut items: Vec<Vec<String>> = Vec::new();
    let mut open = false;
    match base {
        Some(base) => {
            for line in &lines {
                if indent_of(line) == base && DASH_ITEM.is_match(line) {
                    let dash = DASH_ITEM.captures(line).expect("matched")[1].len();
                    let mut replaced = line.to_string();
                    replaced.replace_range(dash..dash + 1, " ");
                    items.push(vec![replaced]);
                    open = true;
                } else if open && (line.trim().is_empty() || indent_of(line) > base) {
                    items.last_mut().expect("open item").push(line.to_string());
                } else {
                    open = false;
                }
            }
        }
        None => {
            for line in &lines {
                if QUERY_KEY_LINE.is_match(line) {
                    items.push(vec![line.to_string()]);
                    open = true;
                } else if open && line.trim().starts_with("```") {
                    open = false;
                } else if open {
                    items.last_mut().expect("open item").push(line.to_string());
                }
            }
        }
    }
    items
        .into_iter()
        .map(|lines| dedent(&lines))
        .filter(|s| !s.trim().is_empty())
        .collect()
}

fn dedent(lines: &[String]) -> String {
    let min = lines
        .iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| indent_of(l))
        .min()
        .unwrap_or(0);
    lines
        .iter()
        .map(|l| match (l.get(..min), l.get(min..)) {
            (Some(prefix), Some(rest)) if prefix.trim().is_empty() => rest,
            _ => l.trim_start(),
        })
        .collect::<Vec<_>>()
        .join("\n")
        .trim_end()
        .to_string()
}

/// Parses one item, first as YAML, then line by line for items that are not
/// valid YAML (for example unquoted values containing `: `). Returns `None`
/// when the item is visibly incomplete (an unterminated quoted value).
pub fn item_fields(item: &str) -> Option<Fields> {
    if let Ok(value) = serde_yaml::from_str::<Value>(item) {
        if let Some(fields) = mapping_fields(&value) {
            return Some(fields);
        }
    }
    lenient_item(item)
}

fn lenient_item(item: &str) -> Option<Fields> {
    let base = item.lines().find(|l| !l.trim().is_empty()).map(indent_of)?;
    let mut fields: Vec<(String, String, bool)> = Vec::new();
    for line in item.lines() {
        let key_line = KEY_LINE.captures(line).filter(|c| c[1].len() == base);
        match key_line {
            Some(c) => {
                let value = c.get(3).map_or("", |m| m.as_str()).trim().to_string();
                let block = matches!(value.as_str(), "|" | ">" | "|-" | ">-");
                let value = if block { String::new() } else { value };
                fields.push((c[2].trim().to_string(), value, block));
            }
            None => {
                let Some((_, value, block)) = fields.last_mut() else { continue };
                let piece = line.trim();
                if piece.is_empty() {
                    continue;
                }
                if !value.is_empty() {
                    value.push(if *block { '\n' } else { ' ' });
                }
                value.push_str(piece);
            }
        }
    }
    if fields.is_empty() {
        return None;
    }
    let mut out = Vec::with_capacity(fields.len());
    for (key, value, _) in fields {
        let value = match unquote(&value) {
            Quoted::Complete(v) => v,
            Quoted::Unterminated => return None,
        };
        out.push((key, FieldValue::Str(value)));
    }
    Some(out)
}

enum Quoted {
    Complete(String),
    Unterminated,
}

fn unquote(value: &str) -> Quoted {
    for q in ['"', '\''] {
        if let Some(rest) = value.strip_prefix(q) {
            return match rest.strip_suffix(q) {
                Some(inner) => Quoted::Complete(inner.to_string()),
                None => Quoted::Unterminated,
            };
        }
    }
    Quoted::Complete(value.to_string())
}
