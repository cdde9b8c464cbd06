//! Per-request records and the summary statistics reported per run.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no samples")]
    Empty,
    #[error("percentile {0} outside (0, 100]")]
    BadPercentile(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestExit {
    Positive,
    Negative,
    BudgetExhausted,
    BeamFinished,
}

impl RequestExit {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Positive => "positive",
            Self::Negative => "negative",
            Self::BudgetExhausted => "budget_exhausted",
            Self::BeamFinished => "beam_finished",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: u64,
    pub arrival_time: f64,
    pub completion_time: f64,
    pub latency: f64,
    pub rollouts_completed: u32,
    pub rollouts_preempted: u32,
    /// Includes tokens of preempted rollouts and pruned beam candidates.
    pub tokens_generated: u64,
    pub exit_kind: RequestExit,
    pub best_score: f64,
    pub solved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub requests: usize,
    pub p50_latency: f64,
    pub p99_latency: f64,
    pub throughput: f64,
    pub total_tokens: u64,
    pub exit_histogram: BTreeMap<RequestExit, usize>,
    pub solve_rate: f64,
}

/// Nearest-rank percentile: the element at `ceil(p/100 * n) - 1` after sorting.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(MetricsError::BadPercentile(p));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn summarize(records: &[RequestRecord]) -> Result<SummaryStats, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let latencies: Vec<f64> = records.iter().map(|r| r.latency).collect();
    let first_arrival = records.iter().map(|r| r.arrival_time).fold(f64::INFINITY, f64::min);
    let last_completion = records
        .iter()
        .map(|r| r.completion_time)
        .fold(f64::NEG_INFINITY, f64::max);
    let span = last_completion - first_arrival;
    let throughput = if span > 0.0 {
        records.len() as f64 / span
    } else {
        f64::INFINITY
    };
    let mut exit_histogram = BTreeMap::new();
    for r in records {
        *exit_histogram.entry(r.exit_kind).or_insert(0) += 1;
    }
    let solved = records.iter().filter(|r| r.solved).count();
    Ok(SummaryStats {
        requests: records.len(),
        p50_latency: percentile(&latencies, 50.0)?,
        p99_latency: percentile(&latencies, 99.0)?,
        throughput,
        total_tokens: records.iter().map(|r| r.tokens_generated).sum(),
        exit_histogram,
        solve_rate: solved as f64 / records.len() as f64,
    })
}

pub const CSV_HEADER: &str = "request_id,arrival,completion,latency,rollouts,preempted,tokens,exit,best_score,solved";

pub fn records_csv(records: &[RequestRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{},{},{},{},{:.6},{}",
            r.request_id,
            r.arrival_time,
            r.completion_time,
            r.latency,
            r.rollouts_completed,
            r.rollouts_preempted,
            r.tokens_generated,
            r.exit_kind.as_str(),
            r.best_score,
            r.solved
        )
        .expect("writing to a String cannot fail");
    }
    out
}

pub fn summary_json(stats: &SummaryStats) -> String {
    let mut s = serde_json::to_string_pretty(stats).expect("summary is always serializable");
    s.push('\n');
    s
}
