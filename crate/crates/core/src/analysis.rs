//! Timing analysis over experiment logs: per-message latencies, summary
//! statistics, deadline misses, per-minute throughput, histograms, and
//! cross-scenario reduction tables.
//!
//! Pure functions over in-memory logs; safe to run concurrently on
//! distinct records.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::agents::LogRecord;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("duplicate key ({client_id}, {seq}) in {log} log")]
    DuplicateKey { log: &'static str, client_id: String, seq: u64 },
    #[error("receive for ({client_id}, {seq}) predates its send")]
    NegativeLatency { client_id: String, seq: u64 },
    #[error("empty input")]
    EmptyInput,
    #[error("bin width must be positive")]
    InvalidBinWidth,
    #[error("no baseline scenario among the records")]
    MissingBaseline,
}

/// One matched (send, receive) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageTiming {
    pub client_id: String,
    pub seq: u64,
    pub send_ts_ns: u64,
    pub recv_ts_ns: u64,
}

impl MessageTiming {
    pub fn latency_ms(&self) -> f64 {
        (self.recv_ts_ns - self.send_ts_ns) as f64 / 1e6
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinOutcome {
    /// Inner join on (client_id, seq), sorted by (client_id, seq).
    pub timings: Vec<MessageTiming>,
    pub unmatched_sends: Vec<(String, u64)>,
    pub unmatched_recvs: Vec<(String, u64)>,
}

/// Join send and receive logs from one run on (client_id, seq).
pub fn join_logs(send: &[LogRecord], recv: &[LogRecord]) -> Result<JoinOutcome, AnalysisError> {
    let index = |records: &[LogRecord], log: &'static str| {
        let mut map: BTreeMap<(String, u64), u64> = BTreeMap::new();
        for r in records {
            if map
                .insert((r.client_id.clone(), r.seq), r.timestamp_ns)
                .is_some()
            {
                return Err(AnalysisError::DuplicateKey {
                    log,
                    client_id: r.client_id.clone(),
                    seq: r.seq,
                });
            }
        }
        Ok(map)
    };
    let sends = index(send, "send")?;
    let mut recvs = index(recv, "recv")?;

    let mut timings = Vec::new();
    let mut unmatched_sends = Vec::new();
    for ((client_id, seq), send_ts_ns) in sends {
        match recvs.remove(&(client_id.clone(), seq)) {
            Some(recv_ts_ns) => {
                if recv_ts_ns < send_ts_ns {
                    return Err(AnalysisError::NegativeLatency { client_id, seq });
                }
                timings.push(MessageTiming { client_id, seq, send_ts_ns, recv_ts_ns });
            }
            None => unmatched_sends.push((client_id, seq)),
        }
    }
    let unmatched_recvs = recvs.into_keys().collect();
    Ok(JoinOutcome { timings, unmatched_sends, unmatched_recvs })
}

/// Aggregate latency statistics in milliseconds. Standard deviation is
/// the population form, `sqrt(sum((x - mean)^2) / n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryStats {
    pub count: u64,
    pub avg_ms: f64,
    pub std_dev_ms: f64,
    pub max_ms: f64,
    pub min_ms: f64,
}

pub fn summary(timings: &[MessageTiming]) -> Result<SummaryStats, AnalysisError> {
    summary_of_latencies(&timings.iter().map(|t| t.latency_ms()).collect::<Vec<_>>())
}

/// Two-pass mean/deviation over raw latencies.
pub fn summary_of_latencies(latencies_ms: &[f64]) -> Result<SummaryStats, AnalysisError> {
    if latencies_ms.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    let n = latencies_ms.len() as f64;
    let avg = latencies_ms.iter().sum::<f64>() / n;
    let var = latencies_ms.iter().map(|x| (x - avg) * (x - avg)).sum::<f64>() / n;
    let max = latencies_ms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = latencies_ms.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SummaryStats {
        count: latencies_ms.len() as u64,
        avg_ms: avg,
        std_dev_ms: var.sqrt(),
        max_ms: max,
        min_ms: min,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeadlineReport {
    pub threshold_ms: f64,
    pub total: u64,
    pub missed: u64,
    /// missed / total.
    pub fraction: f64,
}

/// Fraction of messages whose latency strictly exceeds the threshold.
pub fn deadline_miss(
    timings: &[MessageTiming],
    threshold_ms: f64,
) -> Result<DeadlineReport, AnalysisError> {
    if timings.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    let missed = timings.iter().filter(|t| t.latency_ms() > threshold_ms).count() as u64;
    let total = timings.len() as u64;
    Ok(DeadlineReport { threshold_ms, total, missed, fraction: missed as f64 / total as f64 })
}

const MINUTE_NS: u64 = 60_000_000_000;

/// Receive counts bucketed by minute since run start. Empty minutes up
/// to the last nonempty bucket are emitted as zeros.
pub fn per_minute(recv: &[LogRecord]) -> Vec<(u64, u64)> {
    let mut buckets: BTreeMap<u64, u64> = BTreeMap::new();
    for r in recv {
        *buckets.entry(r.timestamp_ns / MINUTE_NS).or_insert(0) += 1;
    }
    let Some((&last, _)) = buckets.iter().next_back() else {
        return Vec::new();
    };
    (0..=last)
        .map(|minute| (minute, buckets.get(&minute).copied().unwrap_or(0)))
        .collect()
}

/// Latency histogram over half-open bins `[k*w, (k+1)*w)`. Bins run
/// contiguously from the first to the last occupied one.
pub fn histogram(
    timings: &[MessageTiming],
    bin_width_ms: f64,
) -> Result<Vec<(f64, u64)>, AnalysisError> {
    if !(bin_width_ms > 0.0) {
        return Err(AnalysisError::InvalidBinWidth);
    }
    if timings.is_empty() {
        return Ok(Vec::new());
    }
    let mut counts: BTreeMap<i64, u64> = BTreeMap::new();
    for t in timings {
        let bin = (t.latency_ms() / bin_width_ms).floor() as i64;
        *counts.entry(bin).or_insert(0) += 1;
    }
    let (&first, _) = counts.iter().next().expect("nonempty");
    let (&last, _) = counts.iter().next_back().expect("nonempty");
    Ok((first..=last)
        .map(|bin| (bin as f64 * bin_width_ms, counts.get(&bin).copied().unwrap_or(0)))
        .collect())
}

/// Percent reductions of a scenario's stats against the baseline
/// scenario 1, rounded half-up to whole percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompareRow {
    pub scenario: u8,
    pub avg_reduction_pct: i64,
    pub max_reduction_pct: i64,
    pub min_reduction_pct: i64,
}

pub const BASELINE_SCENARIO: u8 = 1;

fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

fn reduction_pct(baseline: f64, value: f64) -> i64 {
    round_half_up((1.0 - value / baseline) * 100.0)
}

/// Reduction table versus scenario 1. Rows come back sorted by scenario
/// id, invariant under input order; the baseline itself is omitted.
pub fn compare(records: &[(u8, SummaryStats)]) -> Result<Vec<CompareRow>, AnalysisError> {
    let baseline = records
        .iter()
        .find(|(id, _)| *id == BASELINE_SCENARIO)
        .map(|(_, stats)| *stats)
        .ok_or(AnalysisError::MissingBaseline)?;
    let mut rows: Vec<CompareRow> = records
        .iter()
        .filter(|(id, _)| *id != BASELINE_SCENARIO)
        .map(|(id, stats)| CompareRow {
            scenario: *id,
            avg_reduction_pct: reduction_pct(baseline.avg_ms, stats.avg_ms),
            max_reduction_pct: reduction_pct(baseline.max_ms, stats.max_ms),
            min_reduction_pct: reduction_pct(baseline.min_ms, stats.min_ms),
        })
        .collect();
    rows.sort_by_key(|r| r.scenario);
    Ok(rows)
}

// ---------------------------------------------------------------------
// Render helpers shared by the CLI report command.

pub fn timings_csv(timings: &[MessageTiming]) -> String {
    let mut out = String::from("client_id,seq,send_ns,recv_ns,latency_ms\n");
    for t in timings {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6}",
            t.client_id,
            t.seq,
            t.send_ts_ns,
            t.recv_ts_ns,
            t.latency_ms()
        );
    }
    out
}

pub fn summary_csv(rows: &[(String, SummaryStats)]) -> String {
    let mut out = String::from("scenario,count,avg_ms,std_ms,max_ms,min_ms\n");
    for (label, s) in rows {
        let _ = writeln!(
            out,
            "{label},{},{:.3},{:.3},{:.3},{:.3}",
            s.count, s.avg_ms, s.std_dev_ms, s.max_ms, s.min_ms
        );
    }
    out
}

pub fn per_minute_csv(series: &[(u64, u64)]) -> String {
    let mut out = String::from("minute,count\n");
    for (minute, count) in series {
        let _ = writeln!(out, "{minute},{count}");
    }
    out
}

pub fn histogram_csv(bins: &[(f64, u64)]) -> String {
    let mut out = String::from("lower_edge_ms,count\n");
    for (edge, count) in bins {
        let _ = writeln!(out, "{edge:.3},{count}");
    }
    out
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("scenario,avg_reduction_pct,max_reduction_pct,min_reduction_pct\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.scenario, r.avg_reduction_pct, r.max_reduction_pct, r.min_reduction_pct
        );
    }
    out
}

/// Human-readable table of average times per message, in milliseconds.
pub fn render_summary_table(rows: &[(String, SummaryStats)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Average times per message, in milliseconds");
    let _ = writeln!(
        out,
        "{:<24} {:>10} {:>14} {:>10} {:>10}",
        "Scenario", "Average", "Std Deviation", "Max", "Min"
    );
    for (label, s) in rows {
        let _ = writeln!(
            out,
            "{label:<24} {:>10.2} {:>14.3} {:>10.2} {:>10.2}",
            s.avg_ms, s.std_dev_ms, s.max_ms, s.min_ms
        );
    }
    out
}

/// Reduction table versus scenario 1, e.g. `avg -54%`.
pub fn render_compare_table(rows: &[CompareRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Reductions versus scenario {BASELINE_SCENARIO}");
    let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>8}", "Scenario", "Avg", "Max", "Min");
    let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>8}", BASELINE_SCENARIO, "-", "-", "-");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:>7}% {:>7}% {:>7}%",
            r.scenario, r.avg_reduction_pct, r.max_reduction_pct, r.min_reduction_pct
        );
    }
    out
}
