//! Topic-based publish/subscribe broker.
//!
//! The configuration mirrors the reference deployment: a per-subscriber
//! in-flight window of 20 QoS 1 messages (the referenced broker's
//! documented default), no cap on the backlog queue (the queue limit was
//! removed so the broker never discards under load), and an optional
//! token-bucket ceiling on deliveries per minute for reproducing the
//! observed messages-per-minute plateau.
//!
//! The core is transport-free: drivers feed it decoded packets plus a
//! monotonic `now_ns` and write out whatever it returns. All state
//! transitions are serializable, so simulation mode runs the whole
//! broker on the single-threaded virtual executor while TCP mode guards
//! it with a lock.

mod server;

pub use server::{spawn_broker_server, BrokerServer};

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::agents::parse_payload;
use crate::codec::{
    topic_matches, ConnectReturnCode, Packet, Publish, QoS, SubAckCode, TopicFilter,
};

/// Identifies one transport connection; assigned by the driver.
pub type ConnId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BrokerError {
    /// The connection must be dropped (e.g. PUBLISH before CONNECT).
    #[error("protocol violation: {0}")]
    ProtocolViolation(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokerConfig {
    /// Max unacknowledged QoS 1 deliveries per subscriber session.
    pub max_inflight: u32,
    /// Backlog bound per session; `None` (the default) never discards.
    pub queue_cap: Option<u32>,
    /// Optional ceiling on deliveries per minute per subscriber session.
    pub delivery_rate_limit_per_min: Option<u32>,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            max_inflight: 20,
            queue_cap: None,
            delivery_rate_limit_per_min: None,
        }
    }
}

impl BrokerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_inflight == 0 {
            return Err("max_inflight must be at least 1".into());
        }
        if self.delivery_rate_limit_per_min == Some(0) {
            return Err("delivery rate limit must be at least 1 per minute".into());
        }
        Ok(())
    }
}

/// Continuous-refill token bucket. Credit is tracked in nanoseconds of
/// accumulated refill time; one token costs `period_ns = 60s / rate`, and
/// capacity is one second of credit — exactly `rate / 60` tokens.
#[derive(Debug, Clone)]
struct TokenBucket {
    period_ns: u64,
    cap_ns: u64,
    credit_ns: u64,
    last_ns: u64,
}

impl TokenBucket {
    fn new(rate_per_min: u32, now_ns: u64) -> Self {
        let period_ns = 60_000_000_000 / rate_per_min as u64;
        // Rates below one per second would otherwise never fit a token.
        let cap_ns = period_ns.max(1_000_000_000);
        TokenBucket { period_ns, cap_ns, credit_ns: cap_ns, last_ns: now_ns }
    }

    fn refill(&mut self, now_ns: u64) {
        let elapsed = now_ns.saturating_sub(self.last_ns);
        self.credit_ns = (self.credit_ns + elapsed).min(self.cap_ns);
        self.last_ns = self.last_ns.max(now_ns);
    }

    fn try_consume(&mut self, now_ns: u64) -> bool {
        self.refill(now_ns);
        if self.credit_ns >= self.period_ns {
            self.credit_ns -= self.period_ns;
            true
        } else {
            false
        }
    }

    /// Earliest instant at which a token will be available.
    fn next_ready_ns(&self, now_ns: u64) -> u64 {
        let credit = (self.credit_ns + now_ns.saturating_sub(self.last_ns)).min(self.cap_ns);
        if credit >= self.period_ns {
            now_ns
        } else {
            now_ns + (self.period_ns - credit)
        }
    }
}

/// Per-client session state. Clean sessions only: a reconnect with the
/// same client id replaces the whole thing.
#[derive(Debug)]
pub struct Session {
    client_id: String,
    conn: ConnId,
    subscriptions: Vec<(TopicFilter, QoS)>,
    /// Deliveries sent and awaiting PUBACK, keyed by packet id.
    inflight: BTreeMap<u16, Publish>,
    /// Deliveries waiting for a free in-flight slot (and a rate token).
    queue: VecDeque<Publish>,
    next_packet_id: u16,
    bucket: Option<TokenBucket>,
    /// Messages discarded because the queue cap was hit.
    dropped_overflow: u64,
}

impl Session {
    fn new(client_id: String, conn: ConnId, cfg: &BrokerConfig, now_ns: u64) -> Self {
        Session {
            client_id,
            conn,
            subscriptions: Vec::new(),
            inflight: BTreeMap::new(),
            queue: VecDeque::new(),
            next_packet_id: 1,
            bucket: cfg
                .delivery_rate_limit_per_min
                .map(|rate| TokenBucket::new(rate, now_ns)),
            dropped_overflow: 0,
        }
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn inflight_len(&self) -> usize {
        self.inflight.len()
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn dropped_overflow(&self) -> u64 {
        self.dropped_overflow
    }

    fn alloc_packet_id(&mut self) -> u16 {
        loop {
            let id = self.next_packet_id;
            self.next_packet_id = if id == u16::MAX { 1 } else { id + 1 };
            if !self.inflight.contains_key(&id) {
                return id;
            }
        }
    }
}

/// What the driver must do after handing the broker an input.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct BrokerOutput {
    /// Packets to write, in order.
    pub outbound: Vec<(ConnId, Packet)>,
    /// Connections to drop (session takeover, rejected connect).
    pub close: Vec<ConnId>,
}

impl BrokerOutput {
    fn push(&mut self, conn: ConnId, packet: Packet) {
        self.outbound.push((conn, packet));
    }
}

#[derive(Debug)]
pub struct Broker {
    cfg: BrokerConfig,
    sessions: BTreeMap<String, Session>,
    conn_client: BTreeMap<ConnId, String>,
}

impl Broker {
    pub fn new(cfg: BrokerConfig) -> Self {
        debug_assert!(cfg.validate().is_ok());
        Broker { cfg, sessions: BTreeMap::new(), conn_client: BTreeMap::new() }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.cfg
    }

    pub fn session(&self, client_id: &str) -> Option<&Session> {
        self.sessions.get(client_id)
    }

    /// Feed one decoded packet from `conn`. Returns the packets to send
    /// and connections to close, or an error when `conn` itself must be
    /// dropped for a protocol violation.
    pub fn handle_packet(
        &mut self,
        conn: ConnId,
        packet: Packet,
        now_ns: u64,
    ) -> Result<BrokerOutput, BrokerError> {
        match packet {
            Packet::Connect { client_id, keep_alive } => {
                self.open_session(conn, client_id, keep_alive, now_ns)
            }
            Packet::Subscribe { packet_id, entries } => {
                let mut out = BrokerOutput::default();
                let granted = self.subscribe(conn, &entries)?;
                out.push(conn, Packet::SubAck { packet_id, granted });
                Ok(out)
            }
            Packet::Publish(publish) => self.publish_inbound(conn, publish, now_ns),
            Packet::PubAck { packet_id } => self.ack_inbound(conn, packet_id, now_ns),
            Packet::PingReq => {
                let mut out = BrokerOutput::default();
                out.push(conn, Packet::PingResp);
                Ok(out)
            }
            Packet::Disconnect => {
                self.connection_closed(conn);
                let mut out = BrokerOutput::default();
                out.close.push(conn);
                Ok(out)
            }
            Packet::ConnAck { .. } | Packet::SubAck { .. } | Packet::PingResp => {
                Err(BrokerError::ProtocolViolation("server-to-client packet from client"))
            }
        }
    }

    /// Clean-session open. An empty client id is rejected with return
    /// code 2; reconnecting under a live client id drops the old session
    /// and its connection.
    fn open_session(
        &mut self,
        conn: ConnId,
        client_id: String,
        _keep_alive: u16,
        now_ns: u64,
    ) -> Result<BrokerOutput, BrokerError> {
        if self.conn_client.contains_key(&conn) {
            return Err(BrokerError::ProtocolViolation("second CONNECT on one connection"));
        }
        let mut out = BrokerOutput::default();
        if client_id.is_empty() {
            out.push(conn, Packet::ConnAck {
                return_code: ConnectReturnCode::IdentifierRejected,
            });
            out.close.push(conn);
            return Ok(out);
        }
        if let Some(old) = self.sessions.remove(&client_id) {
            self.conn_client.remove(&old.conn);
            out.close.push(old.conn);
        }
        self.sessions.insert(
            client_id.clone(),
            Session::new(client_id.clone(), conn, &self.cfg, now_ns),
        );
        self.conn_client.insert(conn, client_id);
        out.push(conn, Packet::ConnAck { return_code: ConnectReturnCode::Accepted });
        Ok(out)
    }

    /// Append filters to the session, granting `min(requested, 1)` per
    /// entry in order; grammatically invalid filters grant 0x80 and are
    /// not added.
    fn subscribe(
        &mut self,
        conn: ConnId,
        entries: &[(String, QoS)],
    ) -> Result<Vec<SubAckCode>, BrokerError> {
        let session = self.session_of_conn(conn)?;
        let mut granted = Vec::with_capacity(entries.len());
        for (raw, requested) in entries {
            match TopicFilter::new(raw.clone()) {
                Ok(filter) => {
                    let qos = (*requested).min(QoS::AtLeastOnce);
                    session.subscriptions.push((filter, qos));
                    granted.push(SubAckCode::granted(qos));
                }
                Err(_) => granted.push(SubAckCode::Failure),
            }
        }
        Ok(granted)
    }

    /// Accept a publish: acknowledge QoS 1 to the publisher, then fan
    /// out to every matching subscriber session exactly once per session
    /// even when several of its filters match.
    fn publish_inbound(
        &mut self,
        conn: ConnId,
        publish: Publish,
        now_ns: u64,
    ) -> Result<BrokerOutput, BrokerError> {
        let publisher = self
            .conn_client
            .get(&conn)
            .ok_or(BrokerError::ProtocolViolation("PUBLISH before CONNECT"))?
            .clone();

        if log::log_enabled!(log::Level::Debug) {
            if let Ok(seq) = parse_payload(&publish.payload) {
                log::debug!("recv {publisher} {seq} {now_ns}");
            }
        }

        let mut out = BrokerOutput::default();
        if let Some(id) = publish.packet_id {
            out.push(conn, Packet::PubAck { packet_id: id });
        }

        for session in self.sessions.values_mut() {
            let granted = session
                .subscriptions
                .iter()
                .filter(|(filter, _)| topic_matches(filter, &publish.topic))
                .map(|(_, qos)| *qos)
                .max();
            let Some(granted) = granted else { continue };

            let effective = publish.qos.min(granted);
            match effective {
                QoS::AtMostOnce => {
                    // Bypasses the window, the queue, and the rate
                    // limiter: emitted at routing time.
                    out.push(
                        session.conn,
                        Packet::Publish(Publish::qos0(
                            publish.topic.clone(),
                            publish.payload.clone(),
                        )),
                    );
                }
                QoS::AtLeastOnce => {
                    if let Some(cap) = self.cfg.queue_cap {
                        if session.queue.len() >= cap as usize {
                            session.dropped_overflow += 1;
                            continue;
                        }
                    }
                    session.queue.push_back(Publish {
                        topic: publish.topic.clone(),
                        payload: publish.payload.clone(),
                        qos: QoS::AtLeastOnce,
                        packet_id: None, // assigned at delivery time
                        dup: false,
                        retain: false,
                    });
                    Self::deliver_next(session, &self.cfg, now_ns, &mut out);
                }
            }
        }
        Ok(out)
    }

    /// Move queued deliveries into the in-flight window while a slot and
    /// a rate token are both available.
    fn deliver_next(
        session: &mut Session,
        cfg: &BrokerConfig,
        now_ns: u64,
        out: &mut BrokerOutput,
    ) {
        while session.inflight.len() < cfg.max_inflight as usize && !session.queue.is_empty() {
            if let Some(bucket) = session.bucket.as_mut() {
                if !bucket.try_consume(now_ns) {
                    break;
                }
            }
            let mut publish = session.queue.pop_front().expect("checked nonempty");
            let id = session.alloc_packet_id();
            publish.packet_id = Some(id);
            session.inflight.insert(id, publish.clone());
            out.push(session.conn, Packet::Publish(publish));
        }
    }

    /// Free the acknowledged in-flight slot and immediately try to
    /// deliver from the queue. Unknown packet ids are ignored.
    fn ack_inbound(
        &mut self,
        conn: ConnId,
        packet_id: u16,
        now_ns: u64,
    ) -> Result<BrokerOutput, BrokerError> {
        let cfg = self.cfg.clone();
        let session = self.session_of_conn(conn)?;
        let mut out = BrokerOutput::default();
        if session.inflight.remove(&packet_id).is_none() {
            log::debug!("puback for unknown packet id {packet_id}, ignored");
            return Ok(out);
        }
        Self::deliver_next(session, &cfg, now_ns, &mut out);
        Ok(out)
    }

    /// Earliest instant at which a rate-limited session with backlog can
    /// deliver again. Drivers arrange a timer and call [`Broker::on_timer`].
    pub fn next_wakeup_ns(&self, now_ns: u64) -> Option<u64> {
        self.sessions
            .values()
            .filter(|s| {
                !s.queue.is_empty() && s.inflight.len() < self.cfg.max_inflight as usize
            })
            .filter_map(|s| s.bucket.as_ref().map(|b| b.next_ready_ns(now_ns)))
            .min()
    }

    /// Retry queued deliveries across all sessions, e.g. after a rate
    /// token refill. Idempotent: spurious timers produce no output.
    pub fn on_timer(&mut self, now_ns: u64) -> BrokerOutput {
        let cfg = self.cfg.clone();
        let mut out = BrokerOutput::default();
        for session in self.sessions.values_mut() {
            Self::deliver_next(session, &cfg, now_ns, &mut out);
        }
        out
    }

    /// Transport-level teardown. Clean sessions evaporate with their
    /// connection.
    pub fn connection_closed(&mut self, conn: ConnId) {
        if let Some(client_id) = self.conn_client.remove(&conn) {
            // Only remove if the session still belongs to this conn; a
            // takeover may already have rebound the client id.
            if self.sessions.get(&client_id).is_some_and(|s| s.conn == conn) {
                self.sessions.remove(&client_id);
            }
        }
    }

    fn session_of_conn(&mut self, conn: ConnId) -> Result<&mut Session, BrokerError> {
        let client_id = self
            .conn_client
            .get(&conn)
            .ok_or(BrokerError::ProtocolViolation("packet before CONNECT"))?;
        Ok(self
            .sessions
            .get_mut(client_id)
            .expect("conn_client and sessions kept in sync"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Topic;

    fn connect(broker: &mut Broker, conn: ConnId, id: &str) -> BrokerOutput {
        broker
            .handle_packet(conn, Packet::Connect { client_id: id.into(), keep_alive: 60 }, 0)
            .unwrap()
    }

    fn subscribe_one(broker: &mut Broker, conn: ConnId, filter: &str) {
        let out = broker
            .handle_packet(
                conn,
                Packet::Subscribe { packet_id: 1, entries: vec![(filter.into(), QoS::AtLeastOnce)] },
                0,
            )
            .unwrap();
        assert!(matches!(out.outbound[0].1, Packet::SubAck { .. }));
    }

    fn publish_qos1(topic: &str, payload: &[u8], id: u16) -> Packet {
        Packet::Publish(Publish::qos1(Topic::new(topic).unwrap(), payload.to_vec(), id))
    }

    fn deliveries(out: &BrokerOutput) -> Vec<(ConnId, &Publish)> {
        out.outbound
            .iter()
            .filter_map(|(c, p)| match p {
                Packet::Publish(p) => Some((*c, p)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn open_session_accepts_and_replaces() {
        let mut b = Broker::new(BrokerConfig::default());
        let out = connect(&mut b, 1, "c1");
        assert_eq!(
            out.outbound,
            vec![(1, Packet::ConnAck { return_code: ConnectReturnCode::Accepted })]
        );
        assert!(b.session("c1").is_some());

        // Clean-session takeover drops the old connection.
        let out = connect(&mut b, 2, "c1");
        assert_eq!(out.close, vec![1]);
        assert_eq!(b.session("c1").unwrap().conn, 2);
    }

    #[test]
    fn empty_client_id_rejected() {
        let mut b = Broker::new(BrokerConfig::default());
        let out = connect(&mut b, 1, "");
        assert_eq!(
            out.outbound,
            vec![(1, Packet::ConnAck { return_code: ConnectReturnCode::IdentifierRejected })]
        );
        assert_eq!(out.close, vec![1]);
    }

    #[test]
    fn subscribe_grants_in_order_with_failures() {
        let mut b = Broker::new(BrokerConfig::default());
        connect(&mut b, 1, "twin");
        let out = b
            .handle_packet(
                1,
                Packet::Subscribe {
                    packet_id: 2,
                    entries: vec![
                        ("dt/#".into(), QoS::AtLeastOnce),
                        ("bad/#/x".into(), QoS::AtLeastOnce),
                        ("a".into(), QoS::AtMostOnce),
                    ],
                },
                0,
            )
            .unwrap();
        assert_eq!(
            out.outbound,
            vec![(
                1,
                Packet::SubAck {
                    packet_id: 2,
                    granted: vec![
                        SubAckCode::GrantedQos1,
                        SubAckCode::Failure,
                        SubAckCode::GrantedQos0,
                    ],
                }
            )]
        );
    }

    #[test]
    fn publish_acks_and_routes_once() {
        let mut b = Broker::new(BrokerConfig::default());
        connect(&mut b, 1, "c1");
        connect(&mut b, 2, "twin");
        subscribe_one(&mut b, 2, "dt/c1/data");

        let out = b.handle_packet(1, publish_qos1("dt/c1/data", b"0...", 5), 0).unwrap();
        assert_eq!(out.outbound[0], (1, Packet::PubAck { packet_id: 5 }));
        assert_eq!(deliveries(&out).len(), 1);
        assert_eq!(deliveries(&out)[0].0, 2);
    }

    #[test]
    fn publish_with_no_subscribers_only_acks() {
        let mut b = Broker::new(BrokerConfig::default());
        connect(&mut b, 1, "c1");
        let out = b.handle_packet(1, publish_qos1("dt/c1/data", b"0", 5), 0).unwrap();
        assert_eq!(out.outbound, vec![(1, Packet::PubAck { packet_id: 5 })]);
    }

    #[test]
    fn overlapping_filters_deliver_once_per_session() {
        let mut b = Broker::new(BrokerConfig::default());
        connect(&mut b, 1, "c1");
        connect(&mut b, 2, "twin");
        let out = b
            .handle_packet(
                2,
                Packet::Subscribe {
                    packet_id: 1,
                    entries: vec![
                        ("dt/#".into(), QoS::AtLeastOnce),
                        ("dt/c1/+".into(), QoS::AtLeastOnce),
                    ],
                },
                0,
            )
            .unwrap();
        assert!(matches!(out.outbound[0].1, Packet::SubAck { .. }));

        let out = b.handle_packet(1, publish_qos1("dt/c1/data", b"7.", 9), 0).unwrap();
        assert_eq!(deliveries(&out).len(), 1);
    }

    #[test]
    fn window_of_one_holds_second_message() {
        let cfg = BrokerConfig { max_inflight: 1, ..Default::default() };
        let mut b = Broker::new(cfg);
        connect(&mut b, 1, "c1");
        connect(&mut b, 2, "twin");
        subscribe_one(&mut b, 2, "dt/+/data");

        let out = b.handle_packet(1, publish_qos1("dt/c1/data", b"0", 1), 0).unwrap();
        assert_eq!(deliveries(&out).len(), 1);
        let first_id = deliveries(&out)[0].1.packet_id.unwrap();

        let out = b.handle_packet(1, publish_qos1("dt/c1/data", b"1", 2), 0).unwrap();
        assert_eq!(deliveries(&out).len(), 0, "m2 must wait for the ack");
        assert_eq!(b.session("twin").unwrap().queue_len(), 1);

        let out = b.handle_packet(2, Packet::PubAck { packet_id: first_id }, 0).unwrap();
        assert_eq!(deliveries(&out).len(), 1, "ack frees the slot for m2");
    }

    /// Simulation-trace oracle: route 21 messages through a window of
    /// 20 with no acks and count emissions.
    #[test]
    fn window_of_twenty_emits_twenty_of_twentyone() {
        let mut b = Broker::new(BrokerConfig::default());
        connect(&mut b, 1, "c1");
        connect(&mut b, 2, "twin");
        subscribe_one(&mut b, 2, "dt/+/data");

        let mut emitted = 0;
        for i in 0..21u16 {
            let out = b
                .handle_packet(1, publish_qos1("dt/c1/data", b"x", i + 1), 0)
                .unwrap();
            emitted += deliveries(&out).len();
        }
        assert_eq!(emitted, 20);
        let twin = b.session("twin").unwrap();
        assert_eq!(twin.inflight_len(), 20);
        assert_eq!(twin.queue_len(), 1);
    }

    #[test]
    fn duplicate_and_unknown_acks_ignored() {
        let mut b = Broker::new(BrokerConfig::default());
        connect(&mut b, 1, "c1");
        connect(&mut b, 2, "twin");
        subscribe_one(&mut b, 2, "dt/+/data");

        let out = b.handle_packet(1, publish_qos1("dt/c1/data", b"0", 1), 0).unwrap();
        let id = deliveries(&out)[0].1.packet_id.unwrap();

        let out = b.handle_packet(2, Packet::PubAck { packet_id: id }, 0).unwrap();
        assert!(out.outbound.is_empty(), "queue empty: nothing re-emitted");
        assert_eq!(b.session("twin").unwrap().inflight_len(), 0);

        let out = b.handle_packet(2, Packet::PubAck { packet_id: id }, 0).unwrap();
        assert!(out.outbound.is_empty(), "duplicate ack is a no-op");
    }

    #[test]
    fn qos0_subscriber_bypasses_window() {
        let cfg = BrokerConfig { max_inflight: 1, ..Default::default() };
        let mut b = Broker::new(cfg);
        connect(&mut b, 1, "c1");
        connect(&mut b, 2, "twin");
        let _ = b.handle_packet(
            2,
            Packet::Subscribe { packet_id: 1, entries: vec![("dt/#".into(), QoS::AtMostOnce)] },
            0,
        );
        for i in 0..5u16 {
            let out = b
                .handle_packet(1, publish_qos1("dt/c1/data", b"x", i + 1), 0)
                .unwrap();
            assert_eq!(deliveries(&out).len(), 1, "QoS 0 emits at routing time");
            assert_eq!(deliveries(&out)[0].1.qos, QoS::AtMostOnce);
        }
    }

    #[test]
    fn queue_cap_discards_overflow() {
        let cfg = BrokerConfig { max_inflight: 1, queue_cap: Some(2), ..Default::default() };
        let mut b = Broker::new(cfg);
        connect(&mut b, 1, "c1");
        connect(&mut b, 2, "twin");
        subscribe_one(&mut b, 2, "dt/+/data");
        for i in 0..5u16 {
            b.handle_packet(1, publish_qos1("dt/c1/data", b"x", i + 1), 0).unwrap();
        }
        let twin = b.session("twin").unwrap();
        assert_eq!(twin.inflight_len(), 1);
        assert_eq!(twin.queue_len(), 2);
        assert_eq!(twin.dropped_overflow(), 2);
    }

    #[test]
    fn publish_before_connect_is_violation() {
        let mut b = Broker::new(BrokerConfig::default());
        let err = b.handle_packet(1, publish_qos1("a", b"", 1), 0).unwrap_err();
        assert!(matches!(err, BrokerError::ProtocolViolation(_)));
    }

    #[test]
    fn rate_limit_throttles_and_reports_wakeup() {
        let cfg = BrokerConfig {
            delivery_rate_limit_per_min: Some(600), // one token per 100 ms
            ..Default::default()
        };
        let mut b = Broker::new(cfg);
        connect(&mut b, 1, "c1");
        connect(&mut b, 2, "twin");
        subscribe_one(&mut b, 2, "dt/+/data");

        // Burst capacity is 1 s of credit = 10 tokens.
        let mut emitted = 0;
        for i in 0..30u16 {
            let out = b
                .handle_packet(1, publish_qos1("dt/c1/data", b"x", i + 1), 0)
                .unwrap();
            emitted += deliveries(&out).len();
        }
        assert_eq!(emitted, 10, "initial burst drains the bucket");
        let wake = b.next_wakeup_ns(0).expect("backlog needs a timer");
        assert_eq!(wake, 100_000_000, "next token 100 ms out");

        // At the wakeup exactly one token has accrued.
        let out = b.on_timer(wake);
        assert_eq!(deliveries(&out).len(), 1);
        assert!(b.on_timer(wake).outbound.is_empty(), "spurious timer is a no-op");
    }

    /// Per-publisher order preservation at QoS 1 through queueing,
    /// window limiting, and staggered acks.
    #[test]
    fn single_publisher_order_is_fifo() {
        let cfg = BrokerConfig { max_inflight: 3, ..Default::default() };
        let mut b = Broker::new(cfg);
        connect(&mut b, 1, "c1");
        connect(&mut b, 2, "twin");
        subscribe_one(&mut b, 2, "dt/+/data");

        let mut received = Vec::new();
        let mut pending_acks: VecDeque<u16> = VecDeque::new();
        let mut drain = |out: &BrokerOutput,
                         received: &mut Vec<Vec<u8>>,
                         pending: &mut VecDeque<u16>| {
            for (_, d) in deliveries(out) {
                received.push(d.payload.clone());
                pending.push_back(d.packet_id.unwrap());
            }
        };

        for i in 0..50u16 {
            let out = b
                .handle_packet(
                    1,
                    publish_qos1("dt/c1/data", format!("{i}").as_bytes(), i + 1),
                    0,
                )
                .unwrap();
            drain(&out, &mut received, &mut pending_acks);
            // Ack every other message to keep the window churning.
            if i % 2 == 0 {
                if let Some(id) = pending_acks.pop_front() {
                    let out = b.handle_packet(2, Packet::PubAck { packet_id: id }, 0).unwrap();
                    drain(&out, &mut received, &mut pending_acks);
                }
            }
        }
        while let Some(id) = pending_acks.pop_front() {
            let out = b.handle_packet(2, Packet::PubAck { packet_id: id }, 0).unwrap();
            drain(&out, &mut received, &mut pending_acks);
        }

        let expected: Vec<Vec<u8>> =
            (0..50).map(|i| format!("{i}").into_bytes()).collect();
        assert_eq!(received, expected);
    }

    /// Window bound invariant under randomized publish/ack interleaving.
    #[test]
    fn inflight_never_exceeds_window_under_random_interleaving() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..50 {
            let max_inflight = rng.random_range(1..=8);
            let cfg = BrokerConfig { max_inflight, ..Default::default() };
            let mut b = Broker::new(cfg);
            connect(&mut b, 1, "c1");
            connect(&mut b, 2, "twin");
            subscribe_one(&mut b, 2, "dt/+/data");

            let mut unacked: Vec<u16> = Vec::new();
            let mut pub_id = 0u16;
            for _ in 0..200 {
                let out = if rng.random_bool(0.6) || unacked.is_empty() {
                    pub_id += 1;
                    b.handle_packet(1, publish_qos1("dt/c1/data", b"x", pub_id), 0).unwrap()
                } else {
                    let pick = rng.random_range(0..unacked.len());
                    let id = unacked.swap_remove(pick);
                    b.handle_packet(2, Packet::PubAck { packet_id: id }, 0).unwrap()
                };
                for (_, d) in deliveries(&out) {
                    unacked.push(d.packet_id.unwrap());
                }
                let twin = b.session("twin").unwrap();
                assert!(
                    twin.inflight_len() <= max_inflight as usize,
                    "trial {trial}: window bound broken"
                );
            }
            // No loss under the unbounded queue: everything routed is
            // eventually emitted once all acks land.
            loop {
                let mut progressed = false;
                while let Some(id) = unacked.pop() {
                    let out = b.handle_packet(2, Packet::PubAck { packet_id: id }, 0).unwrap();
                    for (_, d) in deliveries(&out) {
                        unacked.push(d.packet_id.unwrap());
                        progressed = true;
                    }
                }
                if !progressed {
                    break;
                }
            }
            let twin = b.session("twin").unwrap();
            assert_eq!(twin.queue_len(), 0);
            assert_eq!(twin.inflight_len(), 0);
        }
    }
}
