//! Socket-mode drivers for the workload endpoints: a small blocking
//! MQTT 3.1.1 client built on the codec, plus `run_source` / `run_twin`
//! loops mirroring the simulation actors over real TCP.

use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::{client_from_topic, make_payload, parse_payload, LogRecord, SourceConfig};
use crate::codec::{
    encode_packet, CodecError, ConnectReturnCode, Packet, PacketBuffer, Publish, QoS, SubAckCode,
    Topic, TopicFilter,
};

#[derive(Debug, Error)]
pub enum TcpAgentError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("broker rejected connection: {0:?}")]
    ConnectRejected(ConnectReturnCode),
    #[error("broker rejected subscription entry")]
    SubscribeRejected,
    #[error("connection closed by peer")]
    ConnectionClosed,
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
}

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

/// A blocking MQTT connection that has completed the CONNECT handshake.
pub struct MqttConnection {
    stream: TcpStream,
    buf: PacketBuffer,
}

impl MqttConnection {
    pub fn connect(addr: SocketAddr, client_id: &str) -> Result<Self, TcpAgentError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut conn = MqttConnection { stream, buf: PacketBuffer::new() };
        conn.send(&Packet::Connect { client_id: client_id.into(), keep_alive: 60 })?;
        match conn.recv_deadline(Instant::now() + HANDSHAKE_TIMEOUT, "CONNACK")? {
            Packet::ConnAck { return_code: ConnectReturnCode::Accepted } => Ok(conn),
            Packet::ConnAck { return_code } => Err(TcpAgentError::ConnectRejected(return_code)),
            _ => Err(TcpAgentError::Codec(CodecError::ProtocolViolation(
                "expected CONNACK",
            ))),
        }
    }

    pub fn send(&mut self, packet: &Packet) -> Result<(), TcpAgentError> {
        let bytes = encode_packet(packet)?;
        self.stream.write_all(&bytes)?;
        Ok(())
    }

    /// Subscribe and wait for the matching SUBACK, failing on any 0x80
    /// grant.
    pub fn subscribe(&mut self, filters: &[TopicFilter]) -> Result<(), TcpAgentError> {
        self.send(&Packet::Subscribe {
            packet_id: 1,
            entries: filters
                .iter()
                .map(|f| (f.as_str().to_string(), QoS::AtLeastOnce))
                .collect(),
        })?;
        let deadline = Instant::now() + HANDSHAKE_TIMEOUT;
        loop {
            match self.recv_deadline(deadline, "SUBACK")? {
                Packet::SubAck { granted, .. } => {
                    if granted.iter().any(|g| *g == SubAckCode::Failure) {
                        return Err(TcpAgentError::SubscribeRejected);
                    }
                    return Ok(());
                }
                _ => continue, // unrelated traffic while waiting
            }
        }
    }

    /// Receive the next packet, waiting at most until `deadline`.
    pub fn recv_deadline(
        &mut self,
        deadline: Instant,
        what: &'static str,
    ) -> Result<Packet, TcpAgentError> {
        loop {
            if let Some(packet) = self.buf.next_packet()? {
                return Ok(packet);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(TcpAgentError::Timeout(what));
            }
            self.stream.set_read_timeout(Some(deadline - now))?;
            let mut chunk = [0u8; 4096];
            match self.stream.read(&mut chunk) {
                Ok(0) => return Err(TcpAgentError::ConnectionClosed),
                Ok(n) => self.buf.push_bytes(&chunk[..n]),
                Err(e)
                    if e.kind() == std::io::ErrorKind::WouldBlock
                        || e.kind() == std::io::ErrorKind::TimedOut =>
                {
                    return Err(TcpAgentError::Timeout(what));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Drain whatever packets are already buffered or immediately
    /// readable without blocking.
    pub fn drain_ready(&mut self) -> Result<Vec<Packet>, TcpAgentError> {
        let mut out = Vec::new();
        while let Some(p) = self.buf.next_packet()? {
            out.push(p);
        }
        self.stream.set_nonblocking(true)?;
        let mut chunk = [0u8; 4096];
        loop {
            match self.stream.read(&mut chunk) {
                Ok(0) => break,
                Ok(n) => {
                    self.buf.push_bytes(&chunk[..n]);
                    while let Some(p) = self.buf.next_packet()? {
                        out.push(p);
                    }
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => break,
                Err(e) => {
                    self.stream.set_nonblocking(false)?;
                    return Err(e.into());
                }
            }
        }
        self.stream.set_nonblocking(false)?;
        Ok(out)
    }

    pub fn disconnect(mut self) {
        let _ = self.send(&Packet::Disconnect);
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

/// Publish `cfg.message_count` numbered messages on the fixed schedule
/// `epoch + start_offset + seq * interval`, timestamping each record the
/// instant it is handed to the transport. QoS 1 acks are drained along
/// the way and awaited (up to `ack_wait`) before disconnecting.
pub fn run_source(
    mut conn: MqttConnection,
    cfg: &SourceConfig,
    epoch: Instant,
    start_offset_ns: u64,
    ack_wait: Duration,
) -> Result<Vec<LogRecord>, TcpAgentError> {
    let topic = Topic::new(cfg.topic.clone())
        .map_err(|_| CodecError::InvalidPacket("invalid source topic"))?;
    let mut send_log = Vec::with_capacity(cfg.message_count as usize);
    let mut next_packet_id: u16 = 1;
    let mut acks: u64 = 0;
    let mut qos1_sent: u64 = 0;

    for seq in 0..cfg.message_count {
        let target_ns = start_offset_ns + seq * cfg.interval_ms * 1_000_000;
        sleep_until_offset(epoch, target_ns);

        let payload = make_payload(seq, cfg.payload_size)
            .map_err(|_| CodecError::InvalidPacket("payload too small"))?;
        let publish = match cfg.qos {
            QoS::AtMostOnce => Publish::qos0(topic.clone(), payload),
            QoS::AtLeastOnce => {
                let id = next_packet_id;
                next_packet_id = if id == u16::MAX { 1 } else { id + 1 };
                qos1_sent += 1;
                Publish::qos1(topic.clone(), payload, id)
            }
        };
        let timestamp_ns = epoch.elapsed().as_nanos() as u64;
        conn.send(&Packet::Publish(publish))?;
        send_log.push(LogRecord { client_id: cfg.client_id.clone(), seq, timestamp_ns });

        for packet in conn.drain_ready()? {
            if matches!(packet, Packet::PubAck { .. }) {
                acks += 1;
            }
        }
    }

    // Let outstanding acks land so the disconnect cannot race the tail
    // of the stream through a delay proxy.
    let deadline = Instant::now() + ack_wait;
    while acks < qos1_sent {
        match conn.recv_deadline(deadline, "PUBACK") {
            Ok(Packet::PubAck { .. }) => acks += 1,
            Ok(_) => {}
            Err(TcpAgentError::Timeout(_)) => break,
            Err(e) => return Err(e),
        }
    }
    conn.disconnect();
    Ok(send_log)
}

pub struct TwinOutcome {
    pub recv_log: Vec<LogRecord>,
    pub unparsed: u64,
}

/// Subscribe, signal readiness, then record deliveries until
/// `expected_total` messages arrived or `deadline` passed.
pub fn run_twin(
    addr: SocketAddr,
    filters: &[TopicFilter],
    epoch: Instant,
    expected_total: u64,
    deadline: Instant,
    subscribed: mpsc::Sender<()>,
) -> Result<TwinOutcome, TcpAgentError> {
    let mut conn = MqttConnection::connect(addr, "twin")?;
    conn.subscribe(filters)?;
    let _ = subscribed.send(());

    let mut recv_log = Vec::new();
    let mut unparsed = 0u64;
    while (recv_log.len() as u64 + unparsed) < expected_total {
        let step = (Instant::now() + Duration::from_millis(100)).min(deadline);
        match conn.recv_deadline(step, "PUBLISH") {
            Ok(Packet::Publish(publish)) => {
                let timestamp_ns = epoch.elapsed().as_nanos() as u64;
                match parse_payload(&publish.payload) {
                    Ok(seq) => recv_log.push(LogRecord {
                        client_id: client_from_topic(&publish.topic),
                        seq,
                        timestamp_ns,
                    }),
                    Err(_) => unparsed += 1,
                }
                if let Some(id) = publish.packet_id {
                    conn.send(&Packet::PubAck { packet_id: id })?;
                }
            }
            Ok(_) => {}
            Err(TcpAgentError::Timeout(_)) => {
                if Instant::now() >= deadline {
                    break;
                }
            }
            Err(e) => return Err(e),
        }
    }
    conn.disconnect();
    Ok(TwinOutcome { recv_log, unparsed })
}

fn sleep_until_offset(epoch: Instant, target_ns: u64) {
    let target = epoch + Duration::from_nanos(target_ns);
    let now = Instant::now();
    if target > now {
        std::thread::sleep(target - now);
    }
}
