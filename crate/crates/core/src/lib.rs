//! Multi-query summarization gateway: dataset conversion, prompt
//! rendering, response recovery, backends, batching and evaluation.

pub mod backend;
pub mod cli;
pub mod cost;
pub mod dataset;
pub mod fixture;
pub mod gateway;
pub mod metrics;
pub mod model;
pub mod parse;
pub mod prompt;

pub use model::{
    fingerprint, ContextFingerprint, MatchMethod, MultiQueryJob, OutputFormat, Query, QuerySummaryPair, Transcript,
};
