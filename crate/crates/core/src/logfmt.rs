//! On-disk formats for run artifacts. Everything here is written
//! byte-deterministically so replays can compare files verbatim.
//!
//! - send/recv logs: CSV with header `client_id,seq,timestamp_ns`,
//!   LF line endings, UTF-8. Client ids are validated log-safe (no
//!   comma, no newline) at config time, so no quoting is needed.
//! - `config.txt`: sorted `key=value` lines.
//! - `integrity.txt`: `key=value` lines plus a comma-separated gap list.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::agents::{IntegrityReport, LogRecord};

#[derive(Debug, Error)]
pub enum LogFormatError {
    #[error("i/o on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
}

fn io_err(path: &Path, source: std::io::Error) -> LogFormatError {
    LogFormatError::Io { path: path.display().to_string(), source }
}

pub const LOG_HEADER: &str = "client_id,seq,timestamp_ns";

pub fn render_log_csv(records: &[LogRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 24 + LOG_HEADER.len() + 1);
    out.push_str(LOG_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{},{},{}", r.client_id, r.seq, r.timestamp_ns);
    }
    out
}

pub fn write_log_csv(path: &Path, records: &[LogRecord]) -> Result<(), LogFormatError> {
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(render_log_csv(records).as_bytes())
        .map_err(|e| io_err(path, e))
}

pub fn read_log_csv(path: &Path) -> Result<Vec<LogRecord>, LogFormatError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == LOG_HEADER => {}
        _ => {
            return Err(LogFormatError::Parse {
                path: path.display().to_string(),
                line: 1,
                reason: format!("expected header `{LOG_HEADER}`"),
            })
        }
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.splitn(3, ',');
        let mut parse = |what: &str| {
            fields.next().ok_or_else(|| LogFormatError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                reason: format!("missing {what}"),
            })
        };
        let client_id = parse("client_id")?.to_string();
        let seq = parse("seq")?;
        let ts = parse("timestamp_ns")?;
        let num = |s: &str, what: &str| {
            s.parse::<u64>().map_err(|_| LogFormatError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                reason: format!("bad {what}: {s}"),
            })
        };
        records.push(LogRecord {
            client_id,
            seq: num(seq, "seq")?,
            timestamp_ns: num(ts, "timestamp_ns")?,
        });
    }
    Ok(records)
}

pub fn render_config(entries: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in entries {
        let _ = writeln!(out, "{k}={v}");
    }
    out
}

pub fn write_config(path: &Path, entries: &BTreeMap<String, String>) -> Result<(), LogFormatError> {
    fs::write(path, render_config(entries)).map_err(|e| io_err(path, e))
}

pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>, LogFormatError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut entries = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(LogFormatError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                reason: "expected key=value".into(),
            });
        };
        entries.insert(k.to_string(), v.to_string());
    }
    Ok(entries)
}

pub fn render_integrity(report: &IntegrityReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "expected={}", report.expected);
    let _ = writeln!(out, "received={}", report.received);
    let _ = writeln!(out, "duplicates={}", report.duplicates);
    let _ = writeln!(out, "out_of_order={}", report.out_of_order);
    let _ = writeln!(out, "unparsed={}", report.unparsed);
    let _ = writeln!(out, "unexpected={}", report.unexpected);
    let _ = writeln!(out, "gap_count={}", report.gaps.len());
    let gaps: Vec<String> = report
        .gaps
        .iter()
        .map(|(client, seq)| format!("{client}:{seq}"))
        .collect();
    let _ = writeln!(out, "gaps={}", gaps.join(","));
    out
}

pub fn write_integrity(path: &Path, report: &IntegrityReport) -> Result<(), LogFormatError> {
    fs::write(path, render_integrity(report)).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_csv_roundtrip() {
        let records = vec![
            LogRecord { client_id: "c1".into(), seq: 0, timestamp_ns: 0 },
            LogRecord { client_id: "c1".into(), seq: 1, timestamp_ns: 10_000_000 },
            LogRecord { client_id: "c2".into(), seq: 0, timestamp_ns: 5 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("send.csv");
        write_log_csv(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("client_id,seq,timestamp_ns\n"));
        assert!(text.ends_with('\n'));
        assert!(!text.contains('\r'));
        assert_eq!(read_log_csv(&path).unwrap(), records);
    }

    #[test]
    fn config_roundtrip_sorted() {
        let entries = BTreeMap::from([
            ("seed".to_string(), "42".to_string()),
            ("scenario".to_string(), "1".to_string()),
        ]);
        let rendered = render_config(&entries);
        assert_eq!(rendered, "scenario=1\nseed=42\n");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.txt");
        write_config(&path, &entries).unwrap();
        assert_eq!(read_config(&path).unwrap(), entries);
    }

    #[test]
    fn rejects_wrong_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "nope\n").unwrap();
        assert!(read_log_csv(&path).is_err());
    }

    #[test]
    fn integrity_render_is_stable() {
        let report = IntegrityReport {
            expected: 4,
            received: 3,
            gaps: vec![("c1".into(), 2)],
            duplicates: 0,
            out_of_order: 0,
            unparsed: 0,
            unexpected: 0,
        };
        let text = render_integrity(&report);
        assert!(text.contains("expected=4\n"));
        assert!(text.contains("gap_count=1\n"));
        assert!(text.contains("gaps=c1:2\n"));
    }
}
