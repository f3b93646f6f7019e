//! Command-line entry point for the testbed: run experiments, replay
//! simulation records, analyze result directories, and serve the broker
//! or delay proxy standalone.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use twinbench::agents::LogRecord;
use twinbench::analysis::{
    self, compare, deadline_miss, histogram, join_logs, per_minute, summary, MessageTiming,
    SummaryStats,
};
use twinbench::broker::{spawn_broker_server, BrokerConfig};
use twinbench::codec::QoS;
use twinbench::netem::{spawn_delay_proxy, DelayConfig};
use twinbench::orchestrator::{
    load_config, load_logs, record_dir, replay, run_experiment, run_matrix, save_record,
    ExperimentConfig, Mode, ScenarioConfig, SituationConfig, SituationLabel, WorkloadPoint,
};

#[derive(Parser)]
#[command(
    name = "twinbench",
    about = "Desk-scale MQTT latency testbed: broker, delay emulation, experiments, analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment: a full situation sweep or one custom point.
    Run(RunArgs),
    /// Re-run a sim-mode record and verify byte-identical logs.
    Replay { record_dir: PathBuf },
    /// Compute timings, summaries, histograms, throughput, and
    /// scenario comparisons over a results directory.
    Report(ReportArgs),
    /// Serve the broker on a TCP port.
    Broker(BrokerArgs),
    /// Run the delay proxy standalone.
    Proxy(ProxyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario preset: 1 cloud-only, 2 fog+cloud, 3 fog-only.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    scenario: u8,
    /// Situation sweep preset. Omit to run a single custom point.
    #[arg(long, value_parser = parse_situation)]
    situation: Option<SituationLabel>,
    /// Number of data sources (custom point).
    #[arg(long)]
    sources: Option<u32>,
    /// Messages per source (custom point).
    #[arg(long)]
    messages: Option<u64>,
    /// Publish interval in milliseconds (custom point).
    #[arg(long)]
    interval_ms: Option<u64>,
    /// Payload size in bytes (custom point).
    #[arg(long)]
    payload_bytes: Option<usize>,
    /// sim: deterministic virtual time; tcp: real sockets through the
    /// delay proxy.
    #[arg(long, value_parser = parse_mode, default_value = "sim")]
    mode: Mode,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    max_inflight: u32,
    /// Optional per-subscriber delivery ceiling per minute.
    #[arg(long)]
    rate_limit_per_min: Option<u32>,
    /// Optional backlog cap per subscriber (unbounded by default).
    #[arg(long)]
    queue_cap: Option<u32>,
    /// Publish/subscribe QoS (0 or 1).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=1))]
    qos: u8,
    /// Runs per sweep point.
    #[arg(long, default_value_t = 1)]
    repeats: u32,
    /// Lift the desk-scale cap of 10000 messages/source on situation A.
    #[arg(long)]
    full: bool,
    /// Drain timeout as a multiple of the theoretical run length (tcp).
    #[arg(long, default_value_t = 3.0)]
    timeout_mult: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    dir: PathBuf,
    /// Real-time deadline for the miss table, in milliseconds.
    #[arg(long, default_value_t = 200.0)]
    deadline_ms: f64,
    /// Histogram bin width in milliseconds.
    #[arg(long, default_value_t = 25.0)]
    bin_ms: f64,
}

#[derive(Args)]
struct BrokerArgs {
    #[arg(long, default_value = "127.0.0.1:1883")]
    listen: SocketAddr,
    #[arg(long, default_value_t = 20)]
    max_inflight: u32,
    #[arg(long)]
    rate_limit_per_min: Option<u32>,
    #[arg(long)]
    queue_cap: Option<u32>,
}

#[derive(Args)]
struct ProxyArgs {
    #[arg(long)]
    listen: SocketAddr,
    #[arg(long)]
    upstream: SocketAddr,
    #[arg(long)]
    delay_ms: u64,
    #[arg(long, default_value_t = 0)]
    jitter_ms: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_situation(s: &str) -> Result<SituationLabel, String> {
    SituationLabel::parse(s).ok_or_else(|| format!("unknown situation `{s}` (A, B, or C)"))
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (sim or tcp)"))
}

fn main() -> ExitCode {
    env_logger::init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("twinbench: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => cmd_run(args),
        Command::Replay { record_dir } => cmd_replay(&record_dir),
        Command::Report(args) => cmd_report(args),
        Command::Broker(args) => cmd_broker(args),
        Command::Proxy(args) => cmd_proxy(args),
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let scenario = ScenarioConfig::preset(args.scenario).expect("range-checked");
    let broker = BrokerConfig {
        max_inflight: args.max_inflight,
        queue_cap: args.queue_cap,
        delivery_rate_limit_per_min: args.rate_limit_per_min,
    };
    broker.validate().map_err(|e| anyhow!(e))?;
    let qos = QoS::from_level(args.qos).expect("range-checked");

    let custom_flags = args.sources.is_some()
        || args.messages.is_some()
        || args.interval_ms.is_some()
        || args.payload_bytes.is_some();

    if let Some(label) = args.situation {
        if custom_flags {
            bail!("--situation runs the preset sweep; drop it to run a custom point");
        }
        let situation = SituationConfig::preset(label).expect("A, B, or C");
        let message_cap = if args.full { None } else { Some(10_000) };
        let entries = run_matrix(
            std::slice::from_ref(&scenario),
            &situation,
            args.mode,
            args.seed,
            broker,
            qos,
            message_cap,
            args.repeats,
        );
        let mut failures = 0usize;
        for entry in entries {
            match entry.result {
                Ok(record) => {
                    let dir = record_dir(&args.out, &record.config);
                    save_record(&record, &dir)?;
                    println!(
                        "ok   scenario {} {} seed {} -> {} ({} sent, {} received)",
                        entry.scenario_id,
                        dir.display(),
                        entry.seed,
                        if record.integrity.is_clean() { "clean" } else { "lossy" },
                        record.integrity.expected,
                        record.integrity.received,
                    );
                }
                Err(e) => {
                    failures += 1;
                    eprintln!(
                        "FAIL scenario {} point {:?} seed {}: {e}",
                        entry.scenario_id, entry.point, entry.seed
                    );
                }
            }
        }
        if failures > 0 {
            bail!("{failures} sweep point(s) failed");
        }
        return Ok(());
    }

    let point = WorkloadPoint {
        sources: args.sources.unwrap_or(1),
        messages_per_source: args.messages.unwrap_or(1_000),
        interval_ms: args.interval_ms.unwrap_or(80),
        payload_bytes: args.payload_bytes.unwrap_or(64),
    };
    let mut config = ExperimentConfig::new(
        scenario,
        SituationLabel::Custom,
        point,
        args.mode,
        args.seed,
    );
    config.broker = broker;
    config.qos = qos;
    config.timeout_mult = args.timeout_mult;

    let record = run_experiment(&config)?;
    let dir = record_dir(&args.out, &config);
    save_record(&record, &dir)?;

    let join = join_logs(&record.send_log, &record.recv_log)?;
    println!("record: {}", dir.display());
    if let Ok(stats) = summary(&join.timings) {
        println!(
            "latency ms: mean {:.2} std {:.3} max {:.2} min {:.2} over {} messages",
            stats.avg_ms, stats.std_dev_ms, stats.max_ms, stats.min_ms, stats.count
        );
    }
    Ok(())
}

fn cmd_replay(dir: &Path) -> Result<()> {
    let record = replay(dir).with_context(|| format!("replaying {}", dir.display()))?;
    println!(
        "replay ok: {} messages reproduced byte-identically",
        record.recv_log.len()
    );
    Ok(())
}

/// A run directory is any directory holding a config.txt.
fn find_run_dirs(root: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    if root.join("config.txt").is_file() {
        found.push(root.to_path_buf());
        return Ok(());
    }
    let entries = std::fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?;
    let mut children: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for child in children {
        find_run_dirs(&child, found)?;
    }
    Ok(())
}

struct LoadedRun {
    dir: PathBuf,
    label: String,
    config: ExperimentConfig,
    timings: Vec<MessageTiming>,
    recv_log: Vec<LogRecord>,
    stats: Option<SummaryStats>,
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut run_dirs = Vec::new();
    find_run_dirs(&args.dir, &mut run_dirs)?;
    if run_dirs.is_empty() {
        bail!("no run directories (config.txt) under {}", args.dir.display());
    }

    let mut runs = Vec::new();
    for dir in run_dirs {
        let config = load_config(&dir)?;
        let (send, recv) = load_logs(&dir)?;
        let join = join_logs(&send, &recv)?;
        let stats = summary(&join.timings).ok();
        let label = dir
            .strip_prefix(&args.dir)
            .unwrap_or(&dir)
            .display()
            .to_string();
        let label = if label.is_empty() { ".".to_string() } else { label };
        runs.push(LoadedRun { dir, label, config, timings: join.timings, recv_log: recv, stats });
    }

    // Per-run artifacts.
    for run in &runs {
        std::fs::write(run.dir.join("timings.csv"), analysis::timings_csv(&run.timings))?;
        std::fs::write(
            run.dir.join("per_minute.csv"),
            analysis::per_minute_csv(&per_minute(&run.recv_log)),
        )?;
        std::fs::write(
            run.dir.join("histogram.csv"),
            analysis::histogram_csv(&histogram(&run.timings, args.bin_ms)?),
        )?;
        if let Some(stats) = run.stats {
            std::fs::write(
                run.dir.join("summary.csv"),
                analysis::summary_csv(&[(run.config.scenario.id.to_string(), stats)]),
            )?;
        }
    }

    // Aggregate summary across every run.
    let summary_rows: Vec<(String, SummaryStats)> = runs
        .iter()
        .filter_map(|run| run.stats.map(|s| (run.label.clone(), s)))
        .collect();
    std::fs::write(args.dir.join("summary.csv"), analysis::summary_csv(&summary_rows))?;
    print!("{}", analysis::render_summary_table(&summary_rows));

    // Deadline misses per run.
    println!("\nDeadline misses at {} ms", args.deadline_ms);
    for run in &runs {
        if let Ok(report) = deadline_miss(&run.timings, args.deadline_ms) {
            println!(
                "{:<48} missed {}/{} ({:.2}%)",
                run.label,
                report.missed,
                report.total,
                report.fraction * 100.0
            );
        }
    }

    // Scenario comparison: group runs differing only in scenario.
    let mut groups: BTreeMap<String, Vec<&LoadedRun>> = BTreeMap::new();
    for run in &runs {
        let key = format!(
            "{}/{:?}/{}/{}",
            run.config.situation, run.config.point, run.config.seed, run.config.mode
        );
        groups.entry(key).or_default().push(run);
    }
    let mut compare_rows = Vec::new();
    for group in groups.values() {
        if group.len() < 2 {
            continue;
        }
        let records: Vec<(u8, SummaryStats)> = group
            .iter()
            .filter_map(|run| run.stats.map(|s| (run.config.scenario.id, s)))
            .collect();
        if let Ok(rows) = compare(&records) {
            compare_rows.extend(rows);
        }
    }
    if !compare_rows.is_empty() {
        compare_rows.sort_by_key(|r| r.scenario);
        compare_rows.dedup();
        std::fs::write(args.dir.join("compare.csv"), analysis::compare_csv(&compare_rows))?;
        println!();
        print!("{}", analysis::render_compare_table(&compare_rows));
    }
    Ok(())
}

fn cmd_broker(args: BrokerArgs) -> Result<()> {
    let cfg = BrokerConfig {
        max_inflight: args.max_inflight,
        queue_cap: args.queue_cap,
        delivery_rate_limit_per_min: args.rate_limit_per_min,
    };
    cfg.validate().map_err(|e| anyhow!(e))?;
    let server = spawn_broker_server(args.listen, cfg)?;
    println!("broker listening on {}", server.local_addr());
    loop {
        std::thread::sleep(std::time::Duration::from_secs(3600));
    }
}

fn cmd_proxy(args: ProxyArgs) -> Result<()> {
    let cfg = DelayConfig::new(args.delay_ms, args.jitter_ms).map_err(|e| anyhow!("{e}"))?;
    let proxy = spawn_delay_proxy(args.listen, args.upstream, cfg, args.seed)?;
    println!(
        "proxy on {} -> {} delaying {}",
        proxy.local_addr(),
        args.upstream,
        cfg
    );
    loop {
        std::thread::sleep(std::time::Duration::from_secs(3600));
    }
}
