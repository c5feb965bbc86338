#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: &[&str] = &[
    "remote", "control", "button", "battery", "screen", "budget", "design", "user", "interface", "market", "price",
    "speech", "recognition", "prototype", "rubber", "case", "colour", "logo", "meeting", "project", "the", "we", "should",
    "think", "about", "maybe", "because", "cost", "kinetic", "chip",
];
const SPEAKERS: &[&str] = &["Project Manager", "Marketing", "Industrial Designer", "User Interface"];

pub fn transcript(rng: &mut ChaCha8Rng, words: usize) -> String {
    let mut out = String::new();
    let mut left = words;
    while left > 0 {
        let turn = rng.random_range(8..40).min(left);
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(SPEAKERS.choose(rng).unwrap());
        out.push(':');
        for _ in 0..turn {
            out.push(' ');
            out.push_str(VOCAB.choose(rng).unwrap());
        }
        left -= turn;
    }
    out
}

fn sentence(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Single-query records over `transcripts` synthetic meetings, each with a
/// query count in `queries` and ~`words` transcript words. Speaker labels
/// count as transcript words.
pub fn records_jsonl(transcripts: usize, queries: std::ops::RangeInclusive<usize>, words: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for t in 0..transcripts {
        let text = transcript(&mut rng, words);
        let n = rng.random_range(queries.clone());
        for q in 0..n {
            let len = rng.random_range(40..90);
            let rec = serde_json::json!({
                "transcript_id": format!("meeting-{t:03}"),
                "transcript_text": text,
                "query_text": format!("What did the group say about item {q} ({})?", sentence(&mut rng, 3)),
                "reference_summary": sentence(&mut rng, len),
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
    }
    out
}

pub fn write(dir: &Path, name: &str, content: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, content).unwrap();
    p
}
