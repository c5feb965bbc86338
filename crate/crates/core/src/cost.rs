//! Token and currency accounting.
//!
//! Prices are held as integer micro-USD per million tokens and amounts as
//! integer pico-USD, so `tokens * price` is exact and ledger totals are the
//! exact sum of their entries.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Usage;
use crate::model::{word_count, MultiQueryJob, QuerySummaryPair};
use crate::prompt::{render_with, tokens_for_words, DecodingParams, PromptError, PromptTemplate, TokenEstimator};

pub const DEFAULT_PRICING: &str = include_str!("../pricing/default.toml");

#[derive(Debug, Error)]
pub enum CostError {
    #[error("no price for model {0:?}")]
    UnknownModel(String),
    #[error("invalid price for {model}: {message}")]
    InvalidPrice { model: String, message: String },
    #[error("pricing file: {0}")]
    Parse(String),
    #[error("reading pricing file: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// An amount of money in pico-USD (1e-12 USD).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Money(pub u128);

impl Money {
    pub const PICOS_PER_USD: u128 = 1_000_000_000_000;

    pub fn from_usd_str(s: &str) -> Option<Money> {
        parse_decimal(s, 12).map(Money)
    }

    pub fn picos(&self) -> u128 {
        self.0
    }

    /// Rounded half up to whole micro-USD.
    pub fn micros(&self) -> u128 {
        (self.0 + 500_000) / 1_000_000
    }

    pub fn as_usd(&self) -> f64 {
        self.0 as f64 / Self::PICOS_PER_USD as f64
    }
}

impl std::ops::Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money(0), |a, b| a + b)
    }
}

impl fmt::Display for Money {
    /// USD with six decimals.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let micros = self.micros();
        write!(f, "{}.{:06}", micros / 1_000_000, micros % 1_000_000)
    }
}

/// Exact decimal parse scaled by `10^scale`.
fn parse_decimal(s: &str, scale: u32) -> Option<u128> {
    let s = s.trim();
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    if frac.len() > scale as usize {
        return None;
    }
    let int: u128 = if int.is_empty() { 0 } else { int.parse().ok()? };
    let frac_val: u128 = if frac.is_empty() { 0 } else { frac.parse().ok()? };
    let frac_scaled = frac_val * 10u128.pow(scale - frac.len() as u32);
    int.checked_mul(10u128.pow(scale))?.checked_add(frac_scaled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelPrice {
    /// Micro-USD per one million input tokens.
    pub input_micro_usd_per_million: u64,
    pub output_micro_usd_per_million: u64,
}

impl ModelPrice {
    pub fn from_usd(input_usd_per_million: &str, output_usd_per_million: &str) -> Option<Self> {
        Some(ModelPrice {
            input_micro_usd_per_million: parse_decimal(input_usd_per_million, 6)?.try_into().ok()?,
            output_micro_usd_per_million: parse_decimal(output_usd_per_million, 6)?.try_into().ok()?,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub input: Money,
    pub output: Money,
}

impl Cost {
    pub fn total(&self) -> Money {
        self.input + self.output
    }
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        self.input += rhs.input;
        self.output += rhs.output;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PricingTable {
    models: BTreeMap<String, ModelPrice>,
}

fn price_field(model: &str, table: &toml::Table, key: &str) -> Result<u64, CostError> {
    let invalid = |message: String| CostError::InvalidPrice { model: model.to_string(), message };
    let text = match table.get(key) {
        Some(toml::Value::Float(f)) if f.is_finite() && *f >= 0.0 => format!("{f:.6}"),
        Some(toml::Value::Integer(i)) if *i >= 0 => i.to_string(),
        Some(toml::Value::String(s)) => s.clone(),
        Some(other) => return Err(invalid(format!("{key} = {other} is not a non-negative price"))),
        None => return Err(invalid(format!("missing {key}"))),
    };
    parse_decimal(&text, 6)
        .and_then(|v| u64::try_from(v).ok())
        .ok_or_else(|| invalid(format!("{key} = {text:?} is not a non-negative price")))
}

impl PricingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, model: impl Into<String>, price: ModelPrice) {
        self.models.insert(model.into(), price);
    }

    pub fn builtin() -> Self {
        Self::from_toml(DEFAULT_PRICING).expect("shipped pricing parses")
    }

    /// One table per model with `input_usd_per_million_tokens` and
    /// `output_usd_per_million_tokens`.
    pub fn from_toml(text: &str) -> Result<Self, CostError> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| CostError::Parse(e.to_string()))?;
        let mut table = PricingTable::new();
        for (model, entry) in &doc {
            let entry = entry
                .as_table()
                .ok_or_else(|| CostError::Parse(format!("{model:?} must be a table")))?;
            table.insert(
                model.clone(),
                ModelPrice {
                    input_micro_usd_per_million: price_field(model, entry, "input_usd_per_million_tokens")?,
                    output_micro_usd_per_million: price_field(model, entry, "output_usd_per_million_tokens")?,
                },
            );
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, CostError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, model: &str) -> Option<&ModelPrice> {
        self.models.get(model)
    }

    pub fn models(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }
}

pub fn cost_of(input_tokens: u64, output_tokens: u64, model: &str, table: &PricingTable) -> Result<Cost, CostError> {
    let price = table.get(model).ok_or_else(|| CostError::UnknownModel(model.to_string()))?;
    Ok(Cost {
        input: Money(input_tokens as u128 * price.input_micro_usd_per_million as u128),
        output: Money(output_tokens as u128 * price.output_micro_usd_per_million as u128),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingleQueryEquivalent {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost: Cost,
}

/// Hypothetical spend had every query of `job` been sent with its own copy
/// of the transcript. Output tokens come from `pairs` when given.
pub fn single_query_equivalent(
    job: &MultiQueryJob,
    template: &PromptTemplate,
    params: &DecodingParams,
    table: &PricingTable,
    model: &str,
    pairs: Option<&[QuerySummaryPair]>,
    estimator: &dyn TokenEstimator,
) -> Result<SingleQueryEquivalent, CostError> {
    let mut input_tokens = 0u64;
    for q in job.queries() {
        let single = job.single(q.index()).expect("index from job");
        input_tokens += render_with(&single, template, params, estimator)?.estimated_input_tokens as u64;
    }
    let output_tokens: u64 = pairs
        .unwrap_or_default()
        .iter()
        .map(|p| tokens_for_words(word_count(&p.summary)) as u64)
        .sum();
    let cost = cost_of(input_tokens, output_tokens, model, table)?;
    Ok(SingleQueryEquivalent { input_tokens, output_tokens, cost })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub job_id: String,
    pub model: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub input_cost: Money,
    pub output_cost: Money,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub estimated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub entries: Vec<LedgerEntry>,
    pub single_query_equivalent: SingleQueryEquivalent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub calls: usize,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub input_cost_usd: String,
    pub output_cost_usd: String,
    pub single_query_input_tokens: u64,
    pub single_query_input_cost_usd: String,
    pub savings_ratio: Option<f64>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, job_id: &str, model: &str, usage: &Usage, table: &PricingTable) -> Result<&LedgerEntry, CostError> {
        let cost = cost_of(usage.input_tokens, usage.output_tokens, model, table)?;
        self.entries.push(LedgerEntry {
            job_id: job_id.to_string(),
            model: model.to_string(),
            input_tokens: usage.input_tokens,
            output_tokens: usage.output_tokens,
            input_cost: cost.input,
            output_cost: cost.output,
            estimated: usage.estimated,
        });
        Ok(self.entries.last().expect("just pushed"))
    }

    pub fn add_single_query_equivalent(&mut self, eq: &SingleQueryEquivalent) {
        self.single_query_equivalent.input_tokens += eq.input_tokens;
        self.single_query_equivalent.output_tokens += eq.output_tokens;
        self.single_query_equivalent.cost += eq.cost;
    }

    pub fn input_tokens(&self) -> u64 {
        self.entries.iter().map(|e| e.input_tokens).sum()
    }

    pub fn output_tokens(&self) -> u64 {
        self.entries.iter().map(|e| e.output_tokens).sum()
    }

    pub fn totals(&self) -> Cost {
        Cost {
            input: self.entries.iter().map(|e| e.input_cost).sum(),
            output: self.entries.iter().map(|e| e.output_cost).sum(),
        }
    }

    /// Single-query-equivalent input cost over actual input cost.
    pub fn savings_ratio(&self) -> Option<f64> {
        let actual = self.totals().input.0;
        let single = self.single_query_equivalent.cost.input.0;
        if actual > 0 && single > 0 {
            Some(single as f64 / actual as f64)
        } else {
            None
        }
    }

    /// Token-based ratio, defined even when prices are zero.
    pub fn token_savings_ratio(&self) -> Option<f64> {
        let actual = self.input_tokens();
        let single = self.single_query_equivalent.input_tokens;
        (actual > 0 && single > 0).then(|| single as f64 / actual as f64)
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }

    pub fn summary(&self) -> LedgerSummary {
        let totals = self.totals();
        LedgerSummary {
            calls: self.entries.len(),
            input_tokens: self.input_tokens(),
            output_tokens: self.output_tokens(),
            input_cost_usd: totals.input.to_string(),
            output_cost_usd: totals.output.to_string(),
            single_query_input_tokens: self.single_query_equivalent.input_tokens,
            single_query_input_cost_usd: self.single_query_equivalent.cost.input.to_string(),
            savings_ratio: self.savings_ratio().or_else(|| self.token_savings_ratio()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::WordRatioEstimator;
    use proptest::prelude::*;

    #[test]
    fn twelve_thousand_tokens_of_gpt4o() {
        let table = PricingTable::builtin();
        let c = cost_of(12_000, 0, "gpt-4o", &table).unwrap();
        assert_eq!(c.input, Money::from_usd_str("0.06").unwrap());
        assert_eq!(c.input.to_string(), "0.060000");
        let eight = cost_of(8 * 12_000, 0, "gpt-4o", &table).unwrap();
        assert_eq!(eight.input, Money::from_usd_str("0.48").unwrap());
        assert_eq!(cost_of(0, 0, "gpt-4o", &table).unwrap().total(), Money(0));
        assert!(matches!(cost_of(1, 1, "nope", &table), Err(CostError::UnknownModel(_))));
    }

    #[test]
    fn decimal_parsing() {
        assert_eq!(parse_decimal("5", 6), Some(5_000_000));
        assert_eq!(parse_decimal("0.15", 6), Some(150_000));
        assert_eq!(parse_decimal(".5", 2), Some(50));
        assert_eq!(parse_decimal("1.2345678", 6), None);
        assert_eq!(parse_decimal("-1", 6), None);
        assert_eq!(parse_decimal("", 6), None);
    }

    #[test]
    fn pricing_file_validation() {
        let t = PricingTable::from_toml("[m]\ninput_usd_per_million_tokens = \"0.15\"\noutput_usd_per_million_tokens = 1\n").unwrap();
        assert_eq!(t.get("m").unwrap().input_micro_usd_per_million, 150_000);
        assert_eq!(t.get("m").unwrap().output_micro_usd_per_million, 1_000_000);
        assert!(PricingTable::from_toml("[m]\ninput_usd_per_million_tokens = -1.0\noutput_usd_per_million_tokens = 1\n").is_err());
        assert!(PricingTable::from_toml("[m]\ninput_usd_per_million_tokens = 1.0\n").is_err());
    }

    #[test]
    fn single_query_of_one_is_unity() {
        let text = vec!["word"; 3000].join(" ");
        let job = MultiQueryJob::from_texts("t", text, ["What happened?"]).unwrap();
        let template = PromptTemplate::json_default();
        let params = DecodingParams::default();
        let table = PricingTable::builtin();
        let eq = single_query_equivalent(&job, &template, &params, &table, "gpt-4o", None, &WordRatioEstimator).unwrap();
        let multi = crate::prompt::render(&job, &template, &params).unwrap().estimated_input_tokens as u64;
        assert_eq!(eq.input_tokens, multi);
    }

    #[test]
    fn ledger_totals_and_ratio() {
        let table = PricingTable::builtin();
        let mut ledger = CostLedger::new();
        ledger.record("a", "gpt-4o", &Usage { input_tokens: 1_000, output_tokens: 10, estimated: false }, &table).unwrap();
        ledger.record("b", "gpt-4o", &Usage { input_tokens: 3_000, output_tokens: 20, estimated: true }, &table).unwrap();
        ledger.add_single_query_equivalent(&SingleQueryEquivalent {
            input_tokens: 16_000,
            output_tokens: 0,
            cost: cost_of(16_000, 0, "gpt-4o", &table).unwrap(),
        });
        assert_eq!(ledger.input_tokens(), 4_000);
        assert_eq!(ledger.savings_ratio(), Some(4.0));
        assert_eq!(ledger.to_jsonl().lines().count(), 2);
        assert_eq!(ledger.summary().input_cost_usd, "0.020000");
    }

    proptest! {
        #[test]
        fn ledger_is_additive(usages in prop::collection::vec((0u64..1_000_000, 0u64..100_000), 0..50)) {
            let table = PricingTable::builtin();
            let mut ledger = CostLedger::new();
            for (i, o) in &usages {
                ledger.record("j", "gpt-4o", &Usage { input_tokens: *i, output_tokens: *o, estimated: false }, &table).unwrap();
            }
            let (ti, to): (u64, u64) = usages.iter().fold((0, 0), |a, u| (a.0 + u.0, a.1 + u.1));
            prop_assert_eq!(ledger.totals(), cost_of(ti, to, "gpt-4o", &table).unwrap());
        }
    }
}
