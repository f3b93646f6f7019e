//! Workload endpoints: data sources that publish sequentially numbered
//! messages on a fixed schedule, and the twin-instance subscriber that
//! timestamps arrivals, acknowledges QoS 1 deliveries, and verifies
//! stream integrity at the end of a run.
//!
//! Each source and the twin run as independent logical actors; logs are
//! append-only, owned by their actor, and merged only after the run.

pub mod tcp;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::codec::{Packet, Publish, QoS, Topic, TopicFilter};
use crate::netem::NS_PER_MS;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("payload of {size} bytes cannot hold sequence number {seq}")]
    PayloadTooSmall { seq: u64, size: usize },
    #[error("payload has no leading decimal sequence number")]
    MalformedPayload,
    #[error("invalid source config: {0}")]
    InvalidConfig(String),
}

/// Sequence number in ASCII decimal, padded with `.` filler to exactly
/// `size` bytes. The filler byte is arbitrary; `.` can never be mistaken
/// for a digit.
pub fn make_payload(seq: u64, size: usize) -> Result<Vec<u8>, AgentError> {
    let digits = seq.to_string();
    if digits.len() > size {
        return Err(AgentError::PayloadTooSmall { seq, size });
    }
    let mut payload = Vec::with_capacity(size);
    payload.extend_from_slice(digits.as_bytes());
    payload.resize(size, b'.');
    Ok(payload)
}

/// Inverse of [`make_payload`]: the leading decimal digits.
pub fn parse_payload(payload: &[u8]) -> Result<u64, AgentError> {
    let digits: &[u8] = match payload.iter().position(|b| !b.is_ascii_digit()) {
        Some(0) | None if payload.is_empty() => return Err(AgentError::MalformedPayload),
        Some(0) => return Err(AgentError::MalformedPayload),
        Some(end) => &payload[..end],
        None => payload,
    };
    std::str::from_utf8(digits)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or(AgentError::MalformedPayload)
}

/// Shape of one data source's workload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceConfig {
    pub client_id: String,
    pub message_count: u64,
    pub interval_ms: u64,
    pub payload_size: usize,
    pub topic: String,
    pub qos: QoS,
}

impl SourceConfig {
    pub fn new(
        client_id: impl Into<String>,
        message_count: u64,
        interval_ms: u64,
        payload_size: usize,
        qos: QoS,
    ) -> Result<Self, AgentError> {
        let client_id = client_id.into();
        let topic = format!("dt/{client_id}/data");
        let cfg = SourceConfig { client_id, message_count, interval_ms, payload_size, topic, qos };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.client_id.is_empty() {
            return Err(AgentError::InvalidConfig("client id must not be empty".into()));
        }
        if self
            .client_id
            .contains(['/', '+', '#', '\0', ',', '\n', '\r'])
        {
            return Err(AgentError::InvalidConfig(
                "client id must be topic- and log-safe".into(),
            ));
        }
        Topic::new(self.topic.clone())
            .map_err(|e| AgentError::InvalidConfig(format!("bad topic: {e}")))?;
        if self.message_count > 0 {
            let widest = self.message_count - 1;
            if widest.to_string().len() > self.payload_size {
                return Err(AgentError::InvalidConfig(format!(
                    "payload of {} bytes cannot hold sequence numbers up to {widest}",
                    self.payload_size
                )));
            }
        }
        Ok(())
    }
}

/// One row of a send or receive log. Timestamps are monotonic
/// nanoseconds since run start: virtual time in simulation mode, a
/// single-host monotonic clock in TCP mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub client_id: String,
    pub seq: u64,
    pub timestamp_ns: u64,
}

/// Stream-integrity summary over a receive log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegrityReport {
    /// Total messages the sources were configured to send.
    pub expected: u64,
    /// Everything the twin received, parsed or not.
    pub received: u64,
    /// Missing (client, seq) pairs.
    pub gaps: Vec<(String, u64)>,
    /// Receipts beyond the first for some (client, seq).
    pub duplicates: u64,
    /// Adjacent arrival-order inversions, summed over clients.
    pub out_of_order: u64,
    /// Received but the payload had no parseable sequence number.
    pub unparsed: u64,
    /// Receipts for unknown clients or out-of-range sequence numbers.
    pub unexpected: u64,
}

impl IntegrityReport {
    pub fn is_clean(&self) -> bool {
        self.gaps.is_empty()
            && self.duplicates == 0
            && self.unparsed == 0
            && self.unexpected == 0
            && self.received == self.expected
    }
}

/// Join the receive log against the configured per-client message
/// counts.
pub fn compute_integrity(
    expected_per_client: &BTreeMap<String, u64>,
    recv_log: &[LogRecord],
    unparsed: u64,
) -> IntegrityReport {
    let expected: u64 = expected_per_client.values().sum();
    let mut seen: BTreeMap<&str, BTreeMap<u64, u64>> = BTreeMap::new();
    let mut last_seq: BTreeMap<&str, u64> = BTreeMap::new();
    let mut out_of_order = 0u64;
    let mut unexpected = 0u64;

    for record in recv_log {
        let in_range = expected_per_client
            .get(&record.client_id)
            .is_some_and(|&count| record.seq < count);
        if !in_range {
            unexpected += 1;
            continue;
        }
        if let Some(&prev) = last_seq.get(record.client_id.as_str()) {
            if record.seq < prev {
                out_of_order += 1;
            }
        }
        last_seq.insert(&record.client_id, record.seq);
        *seen
            .entry(&record.client_id)
            .or_default()
            .entry(record.seq)
            .or_insert(0) += 1;
    }

    let mut gaps = Vec::new();
    let mut duplicates = 0u64;
    for (client, &count) in expected_per_client {
        let client_seen = seen.get(client.as_str());
        for seq in 0..count {
            match client_seen.and_then(|m| m.get(&seq)) {
                None => gaps.push((client.clone(), seq)),
                Some(&n) => duplicates += n - 1,
            }
        }
    }

    IntegrityReport {
        expected,
        received: recv_log.len() as u64 + unparsed,
        gaps,
        duplicates,
        out_of_order,
        unparsed,
        unexpected,
    }
}

/// Simulation-mode data source. The driver owns the schedule; this actor
/// builds the packets and keeps the send log.
#[derive(Debug)]
pub struct SimSource {
    cfg: SourceConfig,
    topic: Topic,
    next_packet_id: u16,
    send_log: Vec<LogRecord>,
    connected: bool,
    acks: u64,
}

impl SimSource {
    pub fn new(cfg: SourceConfig) -> Result<Self, AgentError> {
        cfg.validate()?;
        let topic = Topic::new(cfg.topic.clone()).expect("validated");
        Ok(SimSource {
            cfg,
            topic,
            next_packet_id: 1,
            send_log: Vec::new(),
            connected: false,
            acks: 0,
        })
    }

    pub fn config(&self) -> &SourceConfig {
        &self.cfg
    }

    pub fn connect_packet(&self) -> Packet {
        Packet::Connect { client_id: self.cfg.client_id.clone(), keep_alive: 60 }
    }

    /// Offset of publish `seq` from the schedule origin: exactly
    /// `seq * interval`, with no drift accumulation.
    pub fn publish_offset_ns(&self, seq: u64) -> u64 {
        seq * self.cfg.interval_ms * NS_PER_MS
    }

    /// Build publish number `seq` and record it as handed to the
    /// transport at `now_ns`.
    pub fn make_publish(&mut self, seq: u64, now_ns: u64) -> Result<Packet, AgentError> {
        let payload = make_payload(seq, self.cfg.payload_size)?;
        let publish = match self.cfg.qos {
            QoS::AtMostOnce => Publish::qos0(self.topic.clone(), payload),
            QoS::AtLeastOnce => {
                let id = self.next_packet_id;
                self.next_packet_id = if id == u16::MAX { 1 } else { id + 1 };
                Publish::qos1(self.topic.clone(), payload, id)
            }
        };
        self.send_log.push(LogRecord {
            client_id: self.cfg.client_id.clone(),
            seq,
            timestamp_ns: now_ns,
        });
        Ok(Packet::Publish(publish))
    }

    pub fn on_packet(&mut self, packet: &Packet) {
        match packet {
            Packet::ConnAck { .. } => self.connected = true,
            Packet::PubAck { .. } => self.acks += 1,
            _ => {}
        }
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    pub fn acks(&self) -> u64 {
        self.acks
    }

    pub fn send_log(&self) -> &[LogRecord] {
        &self.send_log
    }

    pub fn into_send_log(self) -> Vec<LogRecord> {
        self.send_log
    }
}

/// Simulation-mode twin instance: timestamps every delivered publish,
/// parses the sequence number from the payload and the client id from
/// the second topic level, and acknowledges QoS 1 deliveries after
/// recording.
#[derive(Debug)]
pub struct SimTwin {
    client_id: String,
    filters: Vec<TopicFilter>,
    recv_log: Vec<LogRecord>,
    unparsed: u64,
    connected: bool,
    subscribed: bool,
}

impl SimTwin {
    pub fn new(client_id: impl Into<String>, filters: Vec<TopicFilter>) -> Self {
        SimTwin {
            client_id: client_id.into(),
            filters,
            recv_log: Vec::new(),
            unparsed: 0,
            connected: false,
            subscribed: false,
        }
    }

    pub fn connect_packet(&self) -> Packet {
        Packet::Connect { client_id: self.client_id.clone(), keep_alive: 60 }
    }

    pub fn subscribe_packet(&self) -> Packet {
        Packet::Subscribe {
            packet_id: 1,
            entries: self
                .filters
                .iter()
                .map(|f| (f.as_str().to_string(), QoS::AtLeastOnce))
                .collect(),
        }
    }

    /// Handle a packet from the broker, returning any responses to send:
    /// the SUBSCRIBE once connected, PUBACKs for QoS 1 deliveries.
    pub fn on_packet(&mut self, packet: &Packet, now_ns: u64) -> Vec<Packet> {
        match packet {
            Packet::ConnAck { .. } => {
                self.connected = true;
                vec![self.subscribe_packet()]
            }
            Packet::SubAck { .. } => {
                self.subscribed = true;
                vec![]
            }
            Packet::Publish(publish) => {
                self.record(publish, now_ns);
                match publish.packet_id {
                    Some(id) => vec![Packet::PubAck { packet_id: id }],
                    None => vec![],
                }
            }
            _ => vec![],
        }
    }

    fn record(&mut self, publish: &Publish, now_ns: u64) {
        match parse_payload(&publish.payload) {
            Ok(seq) => {
                let client_id = client_from_topic(&publish.topic);
                self.recv_log.push(LogRecord { client_id, seq, timestamp_ns: now_ns });
            }
            Err(_) => self.unparsed += 1,
        }
    }

    pub fn is_subscribed(&self) -> bool {
        self.subscribed
    }

    pub fn recv_log(&self) -> &[LogRecord] {
        &self.recv_log
    }

    pub fn unparsed(&self) -> u64 {
        self.unparsed
    }

    pub fn integrity(&self, expected_per_client: &BTreeMap<String, u64>) -> IntegrityReport {
        compute_integrity(expected_per_client, &self.recv_log, self.unparsed)
    }

    pub fn into_parts(self) -> (Vec<LogRecord>, u64) {
        (self.recv_log, self.unparsed)
    }
}

/// The publisher's identity under the `dt/<client_id>/data` scheme:
/// topic level 2. Topics outside the scheme map to their full name so
/// the receipt is still attributable.
pub fn client_from_topic(topic: &Topic) -> String {
    let mut levels = topic.as_str().split('/');
    match (levels.next(), levels.next()) {
        (Some(_), Some(client)) => client.to_string(),
        _ => topic.as_str().to_string(),
    }
}

/// Merge per-source send logs into one deterministic order:
/// `(timestamp, client_id, seq)`.
pub fn merge_send_logs(logs: Vec<Vec<LogRecord>>) -> Vec<LogRecord> {
    let mut merged: Vec<LogRecord> = logs.into_iter().flatten().collect();
    merged.sort_by(|a, b| {
        (a.timestamp_ns, &a.client_id, a.seq).cmp(&(b.timestamp_ns, &b.client_id, b.seq))
    });
    merged
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_layout_is_digits_then_filler() {
        assert_eq!(make_payload(7, 4).unwrap(), b"7...");
        assert_eq!(make_payload(999, 8).unwrap(), b"999.....");
        assert_eq!(
            make_payload(1000, 3),
            Err(AgentError::PayloadTooSmall { seq: 1000, size: 3 })
        );
    }

    #[test]
    fn parse_payload_reads_leading_digits() {
        assert_eq!(parse_payload(b"42......").unwrap(), 42);
        assert_eq!(parse_payload(b"0").unwrap(), 0);
        assert_eq!(parse_payload(b"...."), Err(AgentError::MalformedPayload));
        assert_eq!(parse_payload(b""), Err(AgentError::MalformedPayload));
    }

    #[test]
    fn payload_roundtrip_identity() {
        for seq in [0u64, 1, 9, 10, 99, 12345, u32::MAX as u64] {
            let size = seq.to_string().len() + 3;
            assert_eq!(parse_payload(&make_payload(seq, size).unwrap()).unwrap(), seq);
            // Exactly-fitting payloads roundtrip too.
            let tight = make_payload(seq, seq.to_string().len()).unwrap();
            assert_eq!(parse_payload(&tight).unwrap(), seq);
        }
    }

    #[test]
    fn source_config_validates_payload_width() {
        assert!(SourceConfig::new("c1", 1000, 10, 2, QoS::AtLeastOnce).is_err());
        assert!(SourceConfig::new("c1", 1000, 10, 3, QoS::AtLeastOnce).is_ok());
        assert!(SourceConfig::new("", 10, 10, 8, QoS::AtLeastOnce).is_err());
        assert!(SourceConfig::new("a/b", 10, 10, 8, QoS::AtLeastOnce).is_err());
    }

    #[test]
    fn default_topic_scheme() {
        let cfg = SourceConfig::new("c3", 10, 10, 8, QoS::AtLeastOnce).unwrap();
        assert_eq!(cfg.topic, "dt/c3/data");
        assert_eq!(
            client_from_topic(&Topic::new("dt/c3/data").unwrap()),
            "c3"
        );
    }

    #[test]
    fn integrity_clean_run() {
        let expected = BTreeMap::from([("c1".to_string(), 3u64)]);
        let recv: Vec<LogRecord> = (0..3)
            .map(|seq| LogRecord { client_id: "c1".into(), seq, timestamp_ns: seq * 10 })
            .collect();
        let report = compute_integrity(&expected, &recv, 0);
        assert!(report.is_clean());
        assert_eq!(report.received, 3);
        // received - duplicates + |gaps| = expected
        assert_eq!(
            report.received - report.duplicates + report.gaps.len() as u64,
            report.expected
        );
    }

    #[test]
    fn integrity_finds_gaps_and_duplicates() {
        let expected = BTreeMap::from([("c1".to_string(), 4u64)]);
        let seqs = [0u64, 1, 1, 3];
        let recv: Vec<LogRecord> = seqs
            .iter()
            .map(|&seq| LogRecord { client_id: "c1".into(), seq, timestamp_ns: 0 })
            .collect();
        let report = compute_integrity(&expected, &recv, 0);
        assert_eq!(report.gaps, vec![("c1".to_string(), 2)]);
        assert_eq!(report.duplicates, 1);
        assert_eq!(
            report.received - report.duplicates + report.gaps.len() as u64,
            report.expected
        );
    }

    #[test]
    fn integrity_counts_adjacent_inversions() {
        let expected = BTreeMap::from([("c1".to_string(), 4u64)]);
        // Arrival order 0, 2, 1, 3: one adjacent inversion (2 -> 1).
        let recv: Vec<LogRecord> = [0u64, 2, 1, 3]
            .iter()
            .map(|&seq| LogRecord { client_id: "c1".into(), seq, timestamp_ns: 0 })
            .collect();
        let report = compute_integrity(&expected, &recv, 0);
        assert_eq!(report.out_of_order, 1);
        assert!(report.gaps.is_empty());
    }

    #[test]
    fn source_schedule_is_fixed_not_cumulative() {
        let cfg = SourceConfig::new("c1", 3, 10, 8, QoS::AtLeastOnce).unwrap();
        let source = SimSource::new(cfg).unwrap();
        assert_eq!(source.publish_offset_ns(0), 0);
        assert_eq!(source.publish_offset_ns(1), 10 * NS_PER_MS);
        assert_eq!(source.publish_offset_ns(2), 20 * NS_PER_MS);
    }

    #[test]
    fn twin_acks_qos1_and_records() {
        let mut twin = SimTwin::new("twin", vec![TopicFilter::new("dt/+/data").unwrap()]);
        let publish = Publish::qos1(
            Topic::new("dt/c1/data").unwrap(),
            make_payload(5, 8).unwrap(),
            17,
        );
        let responses = twin.on_packet(&Packet::Publish(publish), 123);
        assert_eq!(responses, vec![Packet::PubAck { packet_id: 17 }]);
        assert_eq!(
            twin.recv_log(),
            &[LogRecord { client_id: "c1".into(), seq: 5, timestamp_ns: 123 }]
        );
    }

    #[test]
    fn twin_counts_unparsed_payloads() {
        let mut twin = SimTwin::new("twin", vec![TopicFilter::new("#").unwrap()]);
        let publish = Publish::qos0(Topic::new("dt/c1/data").unwrap(), b"....".to_vec());
        let responses = twin.on_packet(&Packet::Publish(publish), 5);
        assert!(responses.is_empty());
        assert_eq!(twin.unparsed(), 1);
        assert!(twin.recv_log().is_empty());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn payload_roundtrip(seq in 0u64..=u64::MAX / 2, pad in 0usize..16) {
                let size = seq.to_string().len() + pad;
                let payload = make_payload(seq, size).unwrap();
                prop_assert_eq!(payload.len(), size);
                prop_assert_eq!(parse_payload(&payload).unwrap(), seq);
            }
        }
    }
}
