//! ROUGE-1, ROUGE-2 and ROUGE-L over whitespace tokens.
//!
//! Tokens are lowercased whitespace words with leading and trailing
//! punctuation removed. Stemming (Snowball English) is off by default;
//! scores with it enabled can differ slightly from other implementations.

use std::collections::HashMap;
use std::hash::Hash;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(c: &Counts) -> Self {
        let precision = if c.candidate == 0 { 0.0 } else { c.overlap as f64 / c.candidate as f64 };
        let recall = if c.reference == 0 { 0.0 } else { c.overlap as f64 / c.reference as f64 };
        let f1 = if c.overlap == 0 { 0.0 } else { 2.0 * c.overlap as f64 / (c.candidate + c.reference) as f64 };
        Prf { precision, recall, f1 }
    }

    fn add(&mut self, o: &Prf) {
        self.precision += o.precision;
        self.recall += o.recall;
        self.f1 += o.f1;
    }

    fn scale(&mut self, k: f64) {
        self.precision *= k;
        self.recall *= k;
        self.f1 *= k;
    }
}

/// Matched units and the unit totals on each side.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub overlap: usize,
    pub candidate: usize,
    pub reference: usize,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.overlap += o.overlap;
        self.candidate += o.candidate;
        self.reference += o.reference;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub r1: Prf,
    pub r2: Prf,
    pub rl: Prf,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RougeCounts {
    pub r1: Counts,
    pub r2: Counts,
    pub rl: Counts,
}

impl RougeCounts {
    pub fn score(&self) -> RougeScore {
        RougeScore { r1: Prf::from_counts(&self.r1), r2: Prf::from_counts(&self.r2), rl: Prf::from_counts(&self.rl) }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RougeConfig {
    pub stem: bool,
}

pub fn tokenize(text: &str, config: &RougeConfig) -> Vec<String> {
    let stemmer = config.stem.then(|| Stemmer::create(Algorithm::English));
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|w| !w.is_empty())
        .map(|w| match &stemmer {
            Some(s) => s.stem(&w).into_owned(),
            None => w,
        })
        .collect()
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Inputs up to this many tokens (both sides together) use a quadratic scan
/// instead of hash maps.
const SCAN_LIMIT: usize = 64;

fn gram_eq<T: Eq>(x: &[T], y: &[T]) -> bool {
    match x.len() {
        1 => x[0] == y[0],
        2 => x[0] == y[0] && x[1] == y[1],
        _ => x == y,
    }
}

/// Greedy one-to-one matching of candidate grams against unused reference
/// grams; equals the clipped count. Needs at most 64 reference grams.
fn overlap_scan<T: Eq>(candidate: &[T], reference: &[T], n: usize) -> usize {
    let grams = |s: &[T]| (s.len() + 1).saturating_sub(n);
    let r = grams(reference);
    debug_assert!(r <= 64);
    let mut free = if r == 64 { u64::MAX } else { (1u64 << r) - 1 };
    let mut total = 0;
    for i in 0..grams(candidate) {
        let g = &candidate[i..i + n];
        let mut rest = free;
        while rest != 0 {
            let j = rest.trailing_zeros() as usize;
            if gram_eq(&reference[j..j + n], g) {
                free &= !(1 << j);
                total += 1;
                break;
            }
            rest &= rest - 1;
        }
    }
    total
}

fn overlap_hashed<T: Hash + Eq>(candidate: &[T], reference: &[T], n: usize) -> usize {
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    c.iter().map(|(g, k)| (*k).min(r.get(g).copied().unwrap_or(0))).sum()
}

/// Clipped n-gram overlap. `n == 0` yields zero counts.
pub fn ngram_overlap<T: Hash + Eq>(candidate: &[T], reference: &[T], n: usize) -> Counts {
    if n == 0 {
        return Counts::default();
    }
    let overlap = if candidate.len() < n || reference.len() < n {
        0
    } else if candidate.len() + reference.len() <= SCAN_LIMIT {
        overlap_scan(candidate, reference, n)
    } else {
        overlap_hashed(candidate, reference, n)
    };
    Counts {
        overlap,
        candidate: (candidate.len() + 1).saturating_sub(n),
        reference: (reference.len() + 1).saturating_sub(n),
    }
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let (a, b) = if b.len() > a.len() { (b, a) } else { (a, b) };
    if b.is_empty() {
        return 0;
    }
    if b.len() < 64 {
        let mut row = [0usize; 64];
        lcs_row(a, b, &mut row[..=b.len()])
    } else {
        lcs_row(a, b, &mut vec![0; b.len() + 1])
    }
}

fn lcs_row<T: Eq>(a: &[T], b: &[T], row: &mut [usize]) -> usize {
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { row[j].max(up) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_counts_tokens<T: Hash + Eq>(candidate: &[T], reference: &[T]) -> RougeCounts {
    RougeCounts {
        r1: ngram_overlap(candidate, reference, 1),
        r2: ngram_overlap(candidate, reference, 2),
        rl: Counts { overlap: lcs_len(candidate, reference), candidate: candidate.len(), reference: reference.len() },
    }
}

pub fn rouge_tokens<T: Hash + Eq>(candidate: &[T], reference: &[T]) -> RougeScore {
    rouge_counts_tokens(candidate, reference).score()
}

pub fn rouge_counts(candidate: &str, reference: &str, config: &RougeConfig) -> RougeCounts {
    rouge_counts_tokens(&tokenize(candidate, config), &tokenize(reference, config))
}

pub fn rouge(candidate: &str, reference: &str) -> RougeScore {
    rouge_with(candidate, reference, &RougeConfig::default())
}

pub fn rouge_with(candidate: &str, reference: &str, config: &RougeConfig) -> RougeScore {
    rouge_counts(candidate, reference, config).score()
}

/// Mean of per-pair scores.
pub fn macro_average(scores: &[RougeScore]) -> RougeScore {
    let mut out = RougeScore::default();
    if scores.is_empty() {
        return out;
    }
    for s in scores {
        out.r1.add(&s.r1);
        out.r2.add(&s.r2);
        out.rl.add(&s.rl);
    }
    let k = 1.0 / scores.len() as f64;
    out.r1.scale(k);
    out.r2.scale(k);
    out.rl.scale(k);
    out
}

/// Scores from counts pooled over all pairs.
pub fn micro_average(counts: &[RougeCounts]) -> RougeScore {
    let mut pooled = RougeCounts::default();
    for c in counts {
        pooled.r1.add(&c.r1);
        pooled.r2.add(&c.r2);
        pooled.rl.add(&c.rl);
    }
    pooled.score()
}
