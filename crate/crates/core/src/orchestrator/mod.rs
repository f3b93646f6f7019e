//! Experiment orchestration: the scenario and situation presets, the
//! runner for both execution modes, persistence of experiment records,
//! the sweep matrix, and deterministic replay.
//!
//! A persisted run is a directory:
//!
//! ```text
//! out/<scenario>/<situation>/<point>/
//!     config.txt      key=value lines, enough to re-run the experiment
//!     send.csv        client_id,seq,timestamp_ns
//!     recv.csv        client_id,seq,timestamp_ns
//!     integrity.txt   stream integrity summary
//! ```
//!
//! Experiments run one at a time: parallel sweeps would fight over ports
//! and the clock in TCP mode and gain nothing in simulation mode.

mod sim;
mod tcp;

pub use sim::run_sim;
pub use tcp::run_tcp;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::agents::{AgentError, IntegrityReport, LogRecord};
use crate::broker::BrokerConfig;
use crate::codec::QoS;
use crate::logfmt::{self, LogFormatError};
use crate::netem::{DelayConfig, NetemError, NodeClass, NodeId};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Netem(#[from] NetemError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("broker: {0}")]
    Broker(#[from] crate::broker::BrokerError),
    #[error("codec: {0}")]
    Codec(#[from] crate::codec::CodecError),
    #[error("run did not drain: sent {sent}, twin received {received}")]
    DrainIncomplete { sent: u64, received: u64 },
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("port in use: {0}")]
    PortInUse(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    LogFormat(#[from] LogFormatError),
    #[error("tcp agent: {0}")]
    TcpAgent(#[from] crate::agents::tcp::TcpAgentError),
    #[error("replay mismatch in {file}")]
    ReplayMismatch { file: String },
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
    #[error("{file}: missing key {key}")]
    MissingKey { file: String, key: String },
    #[error("worker thread panicked")]
    WorkerPanic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sim,
    Tcp,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "sim" => Some(Mode::Sim),
            "tcp" => Some(Mode::Tcp),
            _ => None,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Sim => "sim",
            Mode::Tcp => "tcp",
        })
    }
}

/// Placement of broker and twin plus the injected egress delays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioConfig {
    pub id: u8,
    pub broker_node: NodeId,
    pub twin_node: NodeId,
    pub egress: BTreeMap<NodeClass, DelayConfig>,
}

impl ScenarioConfig {
    /// The three placements under test:
    ///
    /// 1. Cloud only — broker and twin on the cloud node, clients
    ///    delayed 100 ± 10 ms.
    /// 2. Fog and cloud — broker on the fog node, twin on the cloud;
    ///    clients delayed 40 ± 10 ms, fog egress 20 ± 5 ms.
    /// 3. Fog only — broker and twin both on the fog node, same delays
    ///    as scenario 2.
    pub fn preset(id: u8) -> Option<ScenarioConfig> {
        let delay = |b, v| DelayConfig::new(b, v).expect("preset delays are valid");
        match id {
            1 => Some(ScenarioConfig {
                id: 1,
                broker_node: NodeId::Cloud,
                twin_node: NodeId::Cloud,
                egress: BTreeMap::from([(NodeClass::Client, delay(100, 10))]),
            }),
            2 => Some(ScenarioConfig {
                id: 2,
                broker_node: NodeId::Fog,
                twin_node: NodeId::Cloud,
                egress: BTreeMap::from([
                    (NodeClass::Client, delay(40, 10)),
                    (NodeClass::Fog, delay(20, 5)),
                ]),
            }),
            3 => Some(ScenarioConfig {
                id: 3,
                broker_node: NodeId::Fog,
                twin_node: NodeId::Fog,
                egress: BTreeMap::from([
                    (NodeClass::Client, delay(40, 10)),
                    (NodeClass::Fog, delay(20, 5)),
                ]),
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SituationLabel {
    A,
    B,
    C,
    Custom,
}

impl SituationLabel {
    pub fn parse(s: &str) -> Option<SituationLabel> {
        match s {
            "A" => Some(SituationLabel::A),
            "B" => Some(SituationLabel::B),
            "C" => Some(SituationLabel::C),
            "custom" => Some(SituationLabel::Custom),
            _ => None,
        }
    }
}

impl std::fmt::Display for SituationLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SituationLabel::A => "A",
            SituationLabel::B => "B",
            SituationLabel::C => "C",
            SituationLabel::Custom => "custom",
        })
    }
}

/// One concrete workload: how many sources, how many messages each, the
/// publish interval, and the payload size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkloadPoint {
    pub sources: u32,
    pub messages_per_source: u64,
    pub interval_ms: u64,
    pub payload_bytes: usize,
}

/// A named sweep over workload points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SituationConfig {
    pub label: SituationLabel,
    pub points: Vec<WorkloadPoint>,
}

impl SituationConfig {
    /// Situation A: message volume. 100/1000/10000/100000 messages per
    /// source crossed with 1/3/5 sources; 10 ms interval, 64-byte
    /// payload.
    pub fn preset_a() -> SituationConfig {
        let mut points = Vec::new();
        for &messages in &[100u64, 1_000, 10_000, 100_000] {
            for &sources in &[1u32, 3, 5] {
                points.push(WorkloadPoint {
                    sources,
                    messages_per_source: messages,
                    interval_ms: 10,
                    payload_bytes: 64,
                });
            }
        }
        SituationConfig { label: SituationLabel::A, points }
    }

    /// Situation B: publish interval 10..2560 ms doubling; one source,
    /// 1000 messages, 64-byte payload.
    pub fn preset_b() -> SituationConfig {
        let points = [10u64, 20, 40, 80, 160, 320, 640, 1280, 2560]
            .iter()
            .map(|&interval_ms| WorkloadPoint {
                sources: 1,
                messages_per_source: 1_000,
                interval_ms,
                payload_bytes: 64,
            })
            .collect();
        SituationConfig { label: SituationLabel::B, points }
    }

    /// Situation C: payload 8..512 bytes doubling; one source, 1000
    /// messages, 80 ms interval.
    pub fn preset_c() -> SituationConfig {
        let points = [8usize, 16, 32, 64, 128, 256, 512]
            .iter()
            .map(|&payload_bytes| WorkloadPoint {
                sources: 1,
                messages_per_source: 1_000,
                interval_ms: 80,
                payload_bytes,
            })
            .collect();
        SituationConfig { label: SituationLabel::C, points }
    }

    pub fn preset(label: SituationLabel) -> Option<SituationConfig> {
        match label {
            SituationLabel::A => Some(Self::preset_a()),
            SituationLabel::B => Some(Self::preset_b()),
            SituationLabel::C => Some(Self::preset_c()),
            SituationLabel::Custom => None,
        }
    }

    pub fn custom(point: WorkloadPoint) -> SituationConfig {
        SituationConfig { label: SituationLabel::Custom, points: vec![point] }
    }
}

/// Everything needed to execute (or re-execute) one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub situation: SituationLabel,
    pub point: WorkloadPoint,
    pub mode: Mode,
    pub seed: u64,
    pub broker: BrokerConfig,
    pub qos: QoS,
    /// Drain timeout as a multiple of the theoretical run length
    /// (TCP mode only; simulation completes in virtual time).
    pub timeout_mult: f64,
}

impl ExperimentConfig {
    pub fn new(
        scenario: ScenarioConfig,
        situation: SituationLabel,
        point: WorkloadPoint,
        mode: Mode,
        seed: u64,
    ) -> Self {
        ExperimentConfig {
            scenario,
            situation,
            point,
            mode,
            seed,
            broker: BrokerConfig::default(),
            qos: QoS::AtLeastOnce,
            timeout_mult: 3.0,
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        self.broker
            .validate()
            .map_err(OrchestratorError::InvalidConfig)?;
        if self.point.sources == 0 {
            return Err(OrchestratorError::InvalidConfig("at least one source".into()));
        }
        if self.point.sources > u16::MAX as u32 {
            return Err(OrchestratorError::InvalidConfig("too many sources".into()));
        }
        Ok(())
    }

    pub fn total_messages(&self) -> u64 {
        self.point.sources as u64 * self.point.messages_per_source
    }

    fn to_entries(&self) -> BTreeMap<String, String> {
        let mut e = BTreeMap::new();
        e.insert("scenario".into(), self.scenario.id.to_string());
        e.insert("broker_node".into(), node_to_str(self.scenario.broker_node));
        e.insert("twin_node".into(), node_to_str(self.scenario.twin_node));
        for (class, delay) in &self.scenario.egress {
            e.insert(format!("delay_{}", class.to_string().to_lowercase()), delay.to_string());
        }
        e.insert("situation".into(), self.situation.to_string());
        e.insert("sources".into(), self.point.sources.to_string());
        e.insert("messages_per_source".into(), self.point.messages_per_source.to_string());
        e.insert("interval_ms".into(), self.point.interval_ms.to_string());
        e.insert("payload_bytes".into(), self.point.payload_bytes.to_string());
        e.insert("mode".into(), self.mode.to_string());
        e.insert("seed".into(), self.seed.to_string());
        e.insert("qos".into(), self.qos.level().to_string());
        e.insert("max_inflight".into(), self.broker.max_inflight.to_string());
        e.insert(
            "queue_cap".into(),
            self.broker.queue_cap.map_or("none".into(), |v| v.to_string()),
        );
        e.insert(
            "rate_limit_per_min".into(),
            self.broker
                .delivery_rate_limit_per_min
                .map_or("none".into(), |v| v.to_string()),
        );
        e.insert("timeout_mult".into(), self.timeout_mult.to_string());
        e
    }

    fn from_entries(
        entries: &BTreeMap<String, String>,
        file: &Path,
    ) -> Result<Self, OrchestratorError> {
        let missing = |key: &str| OrchestratorError::MissingKey {
            file: file.display().to_string(),
            key: key.to_string(),
        };
        let bad = |key: &str, value: &str| {
            OrchestratorError::InvalidConfig(format!("bad {key}: {value}"))
        };
        let get = |key: &str| entries.get(key).ok_or_else(|| missing(key));
        let num = |key: &str| -> Result<u64, OrchestratorError> {
            let v = get(key)?;
            v.parse().map_err(|_| bad(key, v))
        };

        let id: u8 = get("scenario")?.parse().map_err(|_| bad("scenario", ""))?;
        let broker_node = parse_node(get("broker_node")?).ok_or_else(|| bad("broker_node", ""))?;
        let twin_node = parse_node(get("twin_node")?).ok_or_else(|| bad("twin_node", ""))?;
        let mut egress = BTreeMap::new();
        for class in [NodeClass::Client, NodeClass::Fog, NodeClass::Cloud] {
            let key = format!("delay_{}", class.to_string().to_lowercase());
            if let Some(value) = entries.get(&key) {
                let delay = parse_delay(value).ok_or_else(|| bad(&key, value))?;
                egress.insert(class, delay);
            }
        }
        let scenario = ScenarioConfig { id, broker_node, twin_node, egress };

        let situation =
            SituationLabel::parse(get("situation")?).ok_or_else(|| bad("situation", ""))?;
        let point = WorkloadPoint {
            sources: num("sources")? as u32,
            messages_per_source: num("messages_per_source")?,
            interval_ms: num("interval_ms")?,
            payload_bytes: num("payload_bytes")? as usize,
        };
        let mode = Mode::parse(get("mode")?).ok_or_else(|| bad("mode", ""))?;
        let seed = num("seed")?;
        let qos = QoS::from_level(num("qos")? as u8).ok_or_else(|| bad("qos", ""))?;
        let opt_num = |key: &str| -> Result<Option<u32>, OrchestratorError> {
            let v = get(key)?;
            if v == "none" {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|_| bad(key, v))
            }
        };
        let broker = BrokerConfig {
            max_inflight: num("max_inflight")? as u32,
            queue_cap: opt_num("queue_cap")?,
            delivery_rate_limit_per_min: opt_num("rate_limit_per_min")?,
        };
        let timeout_mult = get("timeout_mult")
            .map(|v| v.parse().unwrap_or(3.0))
            .unwrap_or(3.0);

        Ok(ExperimentConfig {
            scenario,
            situation,
            point,
            mode,
            seed,
            broker,
            qos,
            timeout_mult,
        })
    }
}

fn node_to_str(node: NodeId) -> String {
    match node {
        NodeId::Client(i) => format!("Client-{i}"),
        NodeId::Fog => "Fog".into(),
        NodeId::Cloud => "Cloud".into(),
    }
}

fn parse_node(s: &str) -> Option<NodeId> {
    match s {
        "Fog" => Some(NodeId::Fog),
        "Cloud" => Some(NodeId::Cloud),
        other => other
            .strip_prefix("Client-")
            .and_then(|i| i.parse().ok())
            .map(NodeId::Client),
    }
}

fn parse_delay(s: &str) -> Option<DelayConfig> {
    let (base, var) = s.split_once("+-")?;
    DelayConfig::new(base.parse().ok()?, var.parse().ok()?).ok()
}

/// The sealed result of one run: enough to replay it (sim mode) and to
/// analyze it.
#[derive(Debug, Clone)]
pub struct ExperimentRecord {
    pub config: ExperimentConfig,
    pub send_log: Vec<LogRecord>,
    pub recv_log: Vec<LogRecord>,
    pub integrity: IntegrityReport,
    pub created_at_unix: u64,
}

/// Execute one experiment to completion in the configured mode.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentRecord, OrchestratorError> {
    config.validate()?;
    let outcome = match config.mode {
        Mode::Sim => run_sim(config)?,
        Mode::Tcp => run_tcp(config)?,
    };
    Ok(ExperimentRecord {
        config: config.clone(),
        send_log: outcome.send_log,
        recv_log: outcome.recv_log,
        integrity: outcome.integrity,
        created_at_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    })
}

/// Logs plus integrity, as produced by either mode's driver.
pub struct RunOutcome {
    pub send_log: Vec<LogRecord>,
    pub recv_log: Vec<LogRecord>,
    pub integrity: IntegrityReport,
}

pub fn scenario_dirname(id: u8) -> String {
    format!("scenario-{id}")
}

pub fn situation_dirname(label: SituationLabel) -> String {
    format!("situation-{label}")
}

pub fn point_dirname(label: SituationLabel, point: &WorkloadPoint) -> String {
    match label {
        SituationLabel::A => format!(
            "msgs-{}-sources-{}",
            point.messages_per_source, point.sources
        ),
        SituationLabel::B => format!("interval-{}", point.interval_ms),
        SituationLabel::C => format!("payload-{}", point.payload_bytes),
        SituationLabel::Custom => format!(
            "msgs-{}-sources-{}-interval-{}-payload-{}",
            point.messages_per_source, point.sources, point.interval_ms, point.payload_bytes
        ),
    }
}

/// `<out>/<scenario>/<situation>/<point>` for a record.
pub fn record_dir(out: &Path, config: &ExperimentConfig) -> PathBuf {
    out.join(scenario_dirname(config.scenario.id))
        .join(situation_dirname(config.situation))
        .join(point_dirname(config.situation, &config.point))
}

pub fn save_record(record: &ExperimentRecord, dir: &Path) -> Result<(), OrchestratorError> {
    std::fs::create_dir_all(dir)?;
    let mut entries = record.config.to_entries();
    entries.insert("created_at_unix".into(), record.created_at_unix.to_string());
    logfmt::write_config(&dir.join("config.txt"), &entries)?;
    logfmt::write_log_csv(&dir.join("send.csv"), &record.send_log)?;
    logfmt::write_log_csv(&dir.join("recv.csv"), &record.recv_log)?;
    logfmt::write_integrity(&dir.join("integrity.txt"), &record.integrity)?;
    Ok(())
}

pub fn load_config(dir: &Path) -> Result<ExperimentConfig, OrchestratorError> {
    let path = dir.join("config.txt");
    let entries = logfmt::read_config(&path)?;
    ExperimentConfig::from_entries(&entries, &path)
}

pub fn load_logs(dir: &Path) -> Result<(Vec<LogRecord>, Vec<LogRecord>), OrchestratorError> {
    Ok((
        logfmt::read_log_csv(&dir.join("send.csv"))?,
        logfmt::read_log_csv(&dir.join("recv.csv"))?,
    ))
}

/// Re-run a persisted simulation record and require byte-identical
/// logs and integrity. TCP records cannot replay deterministically.
pub fn replay(dir: &Path) -> Result<ExperimentRecord, OrchestratorError> {
    let config = load_config(dir)?;
    if config.mode != Mode::Sim {
        return Err(OrchestratorError::Unsupported("replay of a tcp-mode record"));
    }
    let outcome = run_sim(&config)?;

    let checks = [
        ("send.csv", logfmt::render_log_csv(&outcome.send_log)),
        ("recv.csv", logfmt::render_log_csv(&outcome.recv_log)),
        ("integrity.txt", logfmt::render_integrity(&outcome.integrity)),
    ];
    for (file, fresh) in checks {
        let stored = std::fs::read(dir.join(file))?;
        if stored != fresh.as_bytes() {
            return Err(OrchestratorError::ReplayMismatch { file: file.to_string() });
        }
    }
    Ok(ExperimentRecord {
        config,
        send_log: outcome.send_log,
        recv_log: outcome.recv_log,
        integrity: outcome.integrity,
        created_at_unix: 0,
    })
}

/// One sweep cell: which scenario and point ran, with what seed, and how
/// it went.
pub struct MatrixEntry {
    pub scenario_id: u8,
    pub point: WorkloadPoint,
    pub seed: u64,
    pub result: Result<ExperimentRecord, OrchestratorError>,
}

/// Run `situation` across `scenarios`, one record per sweep point per
/// scenario. Seeds derive as `base_seed + point_index` (scaled by
/// `repeats` when repeating), identical across scenarios so scenario
/// comparisons share workload randomness. Failures are reported per
/// cell; remaining cells still run. `message_cap` skips sweep points
/// whose per-source count exceeds it (the desk-scale guard).
#[allow(clippy::too_many_arguments)]
pub fn run_matrix(
    scenarios: &[ScenarioConfig],
    situation: &SituationConfig,
    mode: Mode,
    base_seed: u64,
    broker: BrokerConfig,
    qos: QoS,
    message_cap: Option<u64>,
    repeats: u32,
) -> Vec<MatrixEntry> {
    let repeats = repeats.max(1);
    let mut entries = Vec::new();
    for scenario in scenarios {
        for (point_index, point) in situation.points.iter().enumerate() {
            if message_cap.is_some_and(|cap| point.messages_per_source > cap) {
                continue;
            }
            for rep in 0..repeats {
                let seed = base_seed + point_index as u64 * repeats as u64 + rep as u64;
                let mut config = ExperimentConfig::new(
                    scenario.clone(),
                    situation.label,
                    *point,
                    mode,
                    seed,
                );
                config.broker = broker.clone();
                config.qos = qos;
                entries.push(MatrixEntry {
                    scenario_id: scenario.id,
                    point: *point,
                    seed,
                    result: run_experiment(&config),
                });
            }
        }
    }
    entries
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_presets_match_published_constants() {
        let s1 = ScenarioConfig::preset(1).unwrap();
        assert_eq!(s1.broker_node, NodeId::Cloud);
        assert_eq!(s1.twin_node, NodeId::Cloud);
        assert_eq!(
            s1.egress.get(&NodeClass::Client),
            Some(&DelayConfig::new(100, 10).unwrap())
        );
        assert!(s1.egress.get(&NodeClass::Fog).is_none());

        let s2 = ScenarioConfig::preset(2).unwrap();
        assert_eq!(s2.broker_node, NodeId::Fog);
        assert_eq!(s2.twin_node, NodeId::Cloud);
        assert_eq!(
            s2.egress.get(&NodeClass::Client),
            Some(&DelayConfig::new(40, 10).unwrap())
        );
        assert_eq!(
            s2.egress.get(&NodeClass::Fog),
            Some(&DelayConfig::new(20, 5).unwrap())
        );

        let s3 = ScenarioConfig::preset(3).unwrap();
        assert_eq!(s3.broker_node, NodeId::Fog);
        assert_eq!(s3.twin_node, NodeId::Fog);
        assert_eq!(s3.egress, s2.egress);

        assert!(ScenarioConfig::preset(0).is_none());
        assert!(ScenarioConfig::preset(4).is_none());
    }

    #[test]
    fn situation_cardinalities() {
        assert_eq!(SituationConfig::preset_a().points.len(), 12);
        assert_eq!(SituationConfig::preset_b().points.len(), 9);
        assert_eq!(SituationConfig::preset_c().points.len(), 7);
    }

    #[test]
    fn situation_a_fixed_fields() {
        for p in SituationConfig::preset_a().points {
            assert_eq!(p.interval_ms, 10);
            assert_eq!(p.payload_bytes, 64);
        }
        let intervals: Vec<u64> =
            SituationConfig::preset_b().points.iter().map(|p| p.interval_ms).collect();
        assert_eq!(intervals, vec![10, 20, 40, 80, 160, 320, 640, 1280, 2560]);
        let payloads: Vec<usize> =
            SituationConfig::preset_c().points.iter().map(|p| p.payload_bytes).collect();
        assert_eq!(payloads, vec![8, 16, 32, 64, 128, 256, 512]);
    }

    #[test]
    fn config_entries_roundtrip() {
        let point = WorkloadPoint {
            sources: 3,
            messages_per_source: 500,
            interval_ms: 20,
            payload_bytes: 32,
        };
        let mut config = ExperimentConfig::new(
            ScenarioConfig::preset(2).unwrap(),
            SituationLabel::B,
            point,
            Mode::Sim,
            99,
        );
        config.broker.delivery_rate_limit_per_min = Some(800);
        let entries = config.to_entries();
        let parsed =
            ExperimentConfig::from_entries(&entries, Path::new("config.txt")).unwrap();
        assert_eq!(parsed, config);
    }

    #[test]
    fn point_dirnames_are_stable() {
        let p = WorkloadPoint {
            sources: 3,
            messages_per_source: 1000,
            interval_ms: 40,
            payload_bytes: 64,
        };
        assert_eq!(point_dirname(SituationLabel::A, &p), "msgs-1000-sources-3");
        assert_eq!(point_dirname(SituationLabel::B, &p), "interval-40");
        assert_eq!(point_dirname(SituationLabel::C, &p), "payload-64");
    }
}
