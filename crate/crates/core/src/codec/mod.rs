//! Bit-exact codec for the MQTT 3.1.1 packet subset used by the testbed:
//! CONNECT, CONNACK, PUBLISH (QoS 0/1), PUBACK, SUBSCRIBE, SUBACK,
//! PINGREQ, PINGRESP, DISCONNECT.
//!
//! The decoder is incremental over a growing byte buffer: a prefix of a
//! valid encoding always yields [`CodecError::NeedMoreData`], never
//! `Malformed`, so the same code path serves both the TCP transport and
//! the virtual network. Everything here is a pure function over byte
//! sequences; nothing holds shared state.

mod topic;

pub use topic::{topic_matches, Topic, TopicError, TopicFilter, MAX_TOPIC_LEN};

use thiserror::Error;

/// Largest value representable by the 4-byte remaining-length varint.
pub const MAX_REMAINING_LENGTH: u32 = 268_435_455;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    /// The buffer ends before the frame does; feed more bytes and retry.
    #[error("need more data")]
    NeedMoreData,
    /// The bytes cannot be a packet of the supported subset.
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
    /// Structurally valid bytes carrying a forbidden construct, e.g. a
    /// wildcard inside a PUBLISH topic. Brokers drop the connection.
    #[error("protocol violation: {0}")]
    ProtocolViolation(&'static str),
    /// Remaining length above [`MAX_REMAINING_LENGTH`].
    #[error("value {0} exceeds the remaining-length maximum")]
    OutOfRange(u64),
    /// An invariant violation caught while encoding, e.g. a QoS 1
    /// PUBLISH without a packet id.
    #[error("invalid packet: {0}")]
    InvalidPacket(&'static str),
}

/// Quality of service. The subset supports levels 0 and 1 only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum QoS {
    AtMostOnce = 0,
    AtLeastOnce = 1,
}

impl QoS {
    pub fn from_level(level: u8) -> Option<QoS> {
        match level {
            0 => Some(QoS::AtMostOnce),
            1 => Some(QoS::AtLeastOnce),
            _ => None,
        }
    }

    pub fn level(self) -> u8 {
        self as u8
    }
}

/// CONNACK return codes defined by MQTT 3.1.1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ConnectReturnCode {
    Accepted = 0,
    UnacceptableProtocolVersion = 1,
    IdentifierRejected = 2,
    ServerUnavailable = 3,
    BadCredentials = 4,
    NotAuthorized = 5,
}

impl ConnectReturnCode {
    fn from_byte(b: u8) -> Option<Self> {
        use ConnectReturnCode::*;
        match b {
            0 => Some(Accepted),
            1 => Some(UnacceptableProtocolVersion),
            2 => Some(IdentifierRejected),
            3 => Some(ServerUnavailable),
            4 => Some(BadCredentials),
            5 => Some(NotAuthorized),
            _ => None,
        }
    }
}

/// Per-entry grant in a SUBACK: the granted QoS or 0x80 for failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum SubAckCode {
    GrantedQos0 = 0x00,
    GrantedQos1 = 0x01,
    Failure = 0x80,
}

impl SubAckCode {
    pub fn granted(qos: QoS) -> Self {
        match qos {
            QoS::AtMostOnce => SubAckCode::GrantedQos0,
            QoS::AtLeastOnce => SubAckCode::GrantedQos1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x00 => Some(SubAckCode::GrantedQos0),
            0x01 => Some(SubAckCode::GrantedQos1),
            0x80 => Some(SubAckCode::Failure),
            _ => None,
        }
    }
}

/// An application message in flight. A QoS 1 publish carries a nonzero
/// packet id; a QoS 0 publish carries none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub topic: Topic,
    pub payload: Vec<u8>,
    pub qos: QoS,
    pub packet_id: Option<u16>,
    pub dup: bool,
    pub retain: bool,
}

impl Publish {
    pub fn qos0(topic: Topic, payload: Vec<u8>) -> Self {
        Publish {
            topic,
            payload,
            qos: QoS::AtMostOnce,
            packet_id: None,
            dup: false,
            retain: false,
        }
    }

    pub fn qos1(topic: Topic, payload: Vec<u8>, packet_id: u16) -> Self {
        Publish {
            topic,
            payload,
            qos: QoS::AtLeastOnce,
            packet_id: Some(packet_id),
            dup: false,
            retain: false,
        }
    }
}

/// A decoded control packet of the supported subset.
///
/// SUBSCRIBE entries keep their filter as a raw string: wildcard grammar
/// is a broker-level concern, so that an entry like `bad/#/x` can travel
/// in a well-formed packet and be answered with a 0x80 grant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect { client_id: String, keep_alive: u16 },
    ConnAck { return_code: ConnectReturnCode },
    Publish(Publish),
    PubAck { packet_id: u16 },
    Subscribe { packet_id: u16, entries: Vec<(String, QoS)> },
    SubAck { packet_id: u16, granted: Vec<SubAckCode> },
    PingReq,
    PingResp,
    Disconnect,
}

// Packet type numbers from the fixed header high nibble.
const TYPE_CONNECT: u8 = 1;
const TYPE_CONNACK: u8 = 2;
const TYPE_PUBLISH: u8 = 3;
const TYPE_PUBACK: u8 = 4;
const TYPE_SUBSCRIBE: u8 = 8;
const TYPE_SUBACK: u8 = 9;
const TYPE_PINGREQ: u8 = 12;
const TYPE_PINGRESP: u8 = 13;
const TYPE_DISCONNECT: u8 = 14;

/// Encode `n` as the little-endian base-128 varint with continuation
/// bits used by the fixed-header remaining-length field. Minimal length,
/// 1 to 4 bytes.
pub fn encode_remaining_length(n: u32) -> Result<Vec<u8>, CodecError> {
    if n > MAX_REMAINING_LENGTH {
        return Err(CodecError::OutOfRange(n as u64));
    }
    let mut out = Vec::with_capacity(4);
    let mut value = n;
    loop {
        let mut byte = (value % 128) as u8;
        value /= 128;
        if value > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if value == 0 {
            return Ok(out);
        }
    }
}

/// Decode a remaining-length varint, returning the value and the number
/// of bytes consumed. A dangling continuation bit is `NeedMoreData`; a
/// fifth length byte is `Malformed`.
pub fn decode_remaining_length(bytes: &[u8]) -> Result<(u32, usize), CodecError> {
    let mut multiplier: u32 = 1;
    let mut value: u32 = 0;
    for (i, &byte) in bytes.iter().enumerate() {
        if i == 4 {
            return Err(CodecError::Malformed("remaining length exceeds 4 bytes"));
        }
        value += (byte & 0x7F) as u32 * multiplier;
        if byte & 0x80 == 0 {
            return Ok((value, i + 1));
        }
        multiplier *= 128;
    }
    if bytes.len() >= 4 {
        return Err(CodecError::Malformed("remaining length exceeds 4 bytes"));
    }
    Err(CodecError::NeedMoreData)
}

/// Serialize a packet to its wire form. The inverse of [`decode_packet`]
/// on every valid packet; deterministic.
pub fn encode_packet(packet: &Packet) -> Result<Vec<u8>, CodecError> {
    let mut body = Vec::new();
    let first = match packet {
        Packet::Connect { client_id, keep_alive } => {
            write_string(&mut body, "MQTT")?;
            body.push(4); // protocol level
            body.push(0x02); // clean session, no will, no credentials
            body.extend_from_slice(&keep_alive.to_be_bytes());
            write_string(&mut body, client_id)?;
            TYPE_CONNECT << 4
        }
        Packet::ConnAck { return_code } => {
            body.push(0); // session present: never, clean sessions only
            body.push(*return_code as u8);
            TYPE_CONNACK << 4
        }
        Packet::Publish(p) => {
            match (p.qos, p.packet_id) {
                (QoS::AtMostOnce, Some(_)) => {
                    return Err(CodecError::InvalidPacket("QoS 0 publish with packet id"))
                }
                (QoS::AtLeastOnce, None) => {
                    return Err(CodecError::InvalidPacket("QoS 1 publish without packet id"))
                }
                (QoS::AtLeastOnce, Some(0)) => {
                    return Err(CodecError::InvalidPacket("packet id must be nonzero"))
                }
                _ => {}
            }
            if p.qos == QoS::AtMostOnce && p.dup {
                return Err(CodecError::InvalidPacket("DUP set on QoS 0 publish"));
            }
            write_string(&mut body, p.topic.as_str())?;
            if let Some(id) = p.packet_id {
                body.extend_from_slice(&id.to_be_bytes());
            }
            body.extend_from_slice(&p.payload);
            let mut flags = (p.qos.level()) << 1;
            if p.dup {
                flags |= 0x08;
            }
            if p.retain {
                flags |= 0x01;
            }
            TYPE_PUBLISH << 4 | flags
        }
        Packet::PubAck { packet_id } => {
            body.extend_from_slice(&packet_id.to_be_bytes());
            TYPE_PUBACK << 4
        }
        Packet::Subscribe { packet_id, entries } => {
            if entries.is_empty() {
                return Err(CodecError::InvalidPacket("SUBSCRIBE with no entries"));
            }
            if *packet_id == 0 {
                return Err(CodecError::InvalidPacket("packet id must be nonzero"));
            }
            body.extend_from_slice(&packet_id.to_be_bytes());
            for (filter, qos) in entries {
                write_string(&mut body, filter)?;
                body.push(qos.level());
            }
            TYPE_SUBSCRIBE << 4 | 0x02
        }
        Packet::SubAck { packet_id, granted } => {
            if granted.is_empty() {
                return Err(CodecError::InvalidPacket("SUBACK with no grants"));
            }
            body.extend_from_slice(&packet_id.to_be_bytes());
            body.extend(granted.iter().map(|g| *g as u8));
            TYPE_SUBACK << 4
        }
        Packet::PingReq => TYPE_PINGREQ << 4,
        Packet::PingResp => TYPE_PINGRESP << 4,
        Packet::Disconnect => TYPE_DISCONNECT << 4,
    };

    let mut out = Vec::with_capacity(body.len() + 5);
    out.push(first);
    out.extend_from_slice(&encode_remaining_length(body.len() as u32)?);
    out.extend_from_slice(&body);
    Ok(out)
}

/// Decode one packet from the front of `bytes`, returning it and the
/// number of bytes consumed. Incomplete frames yield `NeedMoreData`.
pub fn decode_packet(bytes: &[u8]) -> Result<(Packet, usize), CodecError> {
    let Some(&first) = bytes.first() else {
        return Err(CodecError::NeedMoreData);
    };
    let packet_type = first >> 4;
    let flags = first & 0x0F;

    let (remaining, len_bytes) = decode_remaining_length(&bytes[1..])?;
    let header_len = 1 + len_bytes;
    let total = header_len + remaining as usize;
    if bytes.len() < total {
        return Err(CodecError::NeedMoreData);
    }
    let body = &bytes[header_len..total];

    let packet = match packet_type {
        TYPE_CONNECT => decode_connect(flags, body)?,
        TYPE_CONNACK => decode_connack(flags, body)?,
        TYPE_PUBLISH => decode_publish(flags, body)?,
        TYPE_PUBACK => Packet::PubAck { packet_id: decode_ack_body(flags, body)? },
        TYPE_SUBSCRIBE => decode_subscribe(flags, body)?,
        TYPE_SUBACK => decode_suback(flags, body)?,
        TYPE_PINGREQ => decode_empty(flags, body, Packet::PingReq)?,
        TYPE_PINGRESP => decode_empty(flags, body, Packet::PingResp)?,
        TYPE_DISCONNECT => decode_empty(flags, body, Packet::Disconnect)?,
        0 | 15 => return Err(CodecError::Malformed("reserved packet type")),
        _ => return Err(CodecError::Malformed("packet type outside supported subset")),
    };
    Ok((packet, total))
}

fn require_flags(flags: u8, expected: u8) -> Result<(), CodecError> {
    if flags != expected {
        return Err(CodecError::Malformed("invalid fixed-header flags"));
    }
    Ok(())
}

fn decode_connect(flags: u8, body: &[u8]) -> Result<Packet, CodecError> {
    require_flags(flags, 0)?;
    let mut r = Reader::new(body);
    let name = r.string()?;
    if name != "MQTT" {
        return Err(CodecError::Malformed("unknown protocol name"));
    }
    if r.u8()? != 4 {
        return Err(CodecError::Malformed("unsupported protocol level"));
    }
    let connect_flags = r.u8()?;
    if connect_flags & 0x01 != 0 {
        return Err(CodecError::Malformed("reserved connect flag set"));
    }
    // Wills and credentials are outside the subset; clean-session is the
    // only session mode, so bit 1 is accepted either way.
    if connect_flags & 0xFC != 0 {
        return Err(CodecError::Malformed("connect feature outside supported subset"));
    }
    let keep_alive = r.u16()?;
    let client_id = r.string()?;
    r.finish()?;
    Ok(Packet::Connect { client_id, keep_alive })
}

fn decode_connack(flags: u8, body: &[u8]) -> Result<Packet, CodecError> {
    require_flags(flags, 0)?;
    let mut r = Reader::new(body);
    let ack_flags = r.u8()?;
    if ack_flags & 0xFE != 0 {
        return Err(CodecError::Malformed("reserved connack flags"));
    }
    let code = r.u8()?;
    r.finish()?;
    let return_code = ConnectReturnCode::from_byte(code)
        .ok_or(CodecError::Malformed("unknown connack return code"))?;
    Ok(Packet::ConnAck { return_code })
}

fn decode_publish(flags: u8, body: &[u8]) -> Result<Packet, CodecError> {
    let dup = flags & 0x08 != 0;
    let retain = flags & 0x01 != 0;
    let qos = match (flags >> 1) & 0x03 {
        0 => QoS::AtMostOnce,
        1 => QoS::AtLeastOnce,
        2 => return Err(CodecError::Malformed("QoS 2 outside supported subset")),
        _ => return Err(CodecError::Malformed("invalid QoS bits")),
    };
    if qos == QoS::AtMostOnce && dup {
        return Err(CodecError::Malformed("DUP set on QoS 0 publish"));
    }
    let mut r = Reader::new(body);
    let topic_str = r.string()?;
    let topic = Topic::new(topic_str).map_err(|e| match e {
        TopicError::WildcardInTopicName => {
            CodecError::ProtocolViolation("wildcard in publish topic")
        }
        _ => CodecError::Malformed("invalid publish topic"),
    })?;
    let packet_id = if qos == QoS::AtLeastOnce {
        let id = r.u16()?;
        if id == 0 {
            return Err(CodecError::Malformed("packet id must be nonzero"));
        }
        Some(id)
    } else {
        None
    };
    let payload = r.rest().to_vec();
    Ok(Packet::Publish(Publish { topic, payload, qos, packet_id, dup, retain }))
}

fn decode_ack_body(flags: u8, body: &[u8]) -> Result<u16, CodecError> {
    require_flags(flags, 0)?;
    let mut r = Reader::new(body);
    let id = r.u16()?;
    r.finish()?;
    Ok(id)
}

fn decode_subscribe(flags: u8, body: &[u8]) -> Result<Packet, CodecError> {
    require_flags(flags, 0x02)?;
    let mut r = Reader::new(body);
    let packet_id = r.u16()?;
    if packet_id == 0 {
        return Err(CodecError::Malformed("packet id must be nonzero"));
    }
    let mut entries = Vec::new();
    while !r.is_empty() {
        let filter = r.string()?;
        if filter.is_empty() {
            return Err(CodecError::Malformed("empty topic filter"));
        }
        let qos_byte = r.u8()?;
        // A conforming peer may request QoS 2; the subset clamps the
        // request to 1 and grants from there.
        let qos = match qos_byte {
            0 => QoS::AtMostOnce,
            1 | 2 => QoS::AtLeastOnce,
            _ => return Err(CodecError::Malformed("invalid requested QoS")),
        };
        entries.push((filter, qos));
    }
    if entries.is_empty() {
        return Err(CodecError::Malformed("SUBSCRIBE with no entries"));
    }
    Ok(Packet::Subscribe { packet_id, entries })
}

fn decode_suback(flags: u8, body: &[u8]) -> Result<Packet, CodecError> {
    require_flags(flags, 0)?;
    let mut r = Reader::new(body);
    let packet_id = r.u16()?;
    let mut granted = Vec::new();
    while !r.is_empty() {
        let code = SubAckCode::from_byte(r.u8()?)
            .ok_or(CodecError::Malformed("unknown suback code"))?;
        granted.push(code);
    }
    if granted.is_empty() {
        return Err(CodecError::Malformed("SUBACK with no grants"));
    }
    Ok(Packet::SubAck { packet_id, granted })
}

fn decode_empty(flags: u8, body: &[u8], packet: Packet) -> Result<Packet, CodecError> {
    require_flags(flags, 0)?;
    if !body.is_empty() {
        return Err(CodecError::Malformed("unexpected payload"));
    }
    Ok(packet)
}

fn write_string(out: &mut Vec<u8>, s: &str) -> Result<(), CodecError> {
    if s.len() > u16::MAX as usize {
        return Err(CodecError::InvalidPacket("string exceeds 65535 bytes"));
    }
    if s.contains('\0') {
        return Err(CodecError::InvalidPacket("string contains NUL"));
    }
    out.extend_from_slice(&(s.len() as u16).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Body-relative cursor. All reads fail with `Malformed`, not
/// `NeedMoreData`: the frame is complete by the time a body is parsed,
/// so running out of body bytes means the length fields lie.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        let b = self
            .buf
            .get(self.pos)
            .copied()
            .ok_or(CodecError::Malformed("truncated packet body"))?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        let hi = self.u8()?;
        let lo = self.u8()?;
        Ok(u16::from_be_bytes([hi, lo]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() - self.pos < n {
            return Err(CodecError::Malformed("truncated packet body"));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn string(&mut self) -> Result<String, CodecError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        if bytes.contains(&0) {
            return Err(CodecError::Malformed("string contains NUL"));
        }
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CodecError::Malformed("invalid UTF-8 string"))
    }

    fn rest(&mut self) -> &'a [u8] {
        let slice = &self.buf[self.pos..];
        self.pos = self.buf.len();
        slice
    }

    fn finish(&self) -> Result<(), CodecError> {
        if self.pos != self.buf.len() {
            return Err(CodecError::Malformed("trailing bytes after packet body"));
        }
        Ok(())
    }
}

/// Growing receive buffer that yields complete packets as they arrive.
#[derive(Debug, Default)]
pub struct PacketBuffer {
    buf: Vec<u8>,
}

impl PacketBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_bytes(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Pop the next complete packet, or `None` if the buffer holds only
    /// a partial frame.
    pub fn next_packet(&mut self) -> Result<Option<Packet>, CodecError> {
        match decode_packet(&self.buf) {
            Ok((packet, consumed)) => {
                self.buf.drain(..consumed);
                Ok(Some(packet))
            }
            Err(CodecError::NeedMoreData) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topic(s: &str) -> Topic {
        Topic::new(s).unwrap()
    }

    #[test]
    fn remaining_length_examples() {
        assert_eq!(encode_remaining_length(0).unwrap(), vec![0x00]);
        // 321 = 65 + 2 * 128
        assert_eq!(encode_remaining_length(321).unwrap(), vec![0xC1, 0x02]);
        assert_eq!(
            encode_remaining_length(268_435_455).unwrap(),
            vec![0xFF, 0xFF, 0xFF, 0x7F]
        );
        assert_eq!(
            encode_remaining_length(268_435_456),
            Err(CodecError::OutOfRange(268_435_456))
        );
    }

    #[test]
    fn remaining_length_decode() {
        assert_eq!(decode_remaining_length(&[0xC1, 0x02]).unwrap(), (321, 2));
        assert_eq!(
            decode_remaining_length(&[0x80]),
            Err(CodecError::NeedMoreData)
        );
        assert_eq!(
            decode_remaining_length(&[0xFF, 0xFF, 0xFF, 0xFF, 0x01]),
            Err(CodecError::Malformed("remaining length exceeds 4 bytes"))
        );
        // Trailing garbage after the terminator is not consumed.
        assert_eq!(decode_remaining_length(&[0x00, 0xAB]).unwrap(), (0, 1));
    }

    #[test]
    fn remaining_length_roundtrip_exhaustive_low() {
        for n in 0..=0x1_0000u32 {
            let enc = encode_remaining_length(n).unwrap();
            assert_eq!(decode_remaining_length(&enc).unwrap(), (n, enc.len()));
        }
        // Sampled above 2^16 up to the maximum.
        for n in (0x1_0000u32..=MAX_REMAINING_LENGTH).step_by(65_537) {
            let enc = encode_remaining_length(n).unwrap();
            assert_eq!(decode_remaining_length(&enc).unwrap(), (n, enc.len()));
        }
    }

    #[test]
    fn pingreq_is_two_fixed_bytes() {
        assert_eq!(encode_packet(&Packet::PingReq).unwrap(), vec![0xC0, 0x00]);
        assert_eq!(
            decode_packet(&[0xD0, 0x00]).unwrap(),
            (Packet::PingResp, 2)
        );
    }

    /// Frozen against an independent MQTT 3.1.1 reference decoder.
    #[test]
    fn publish_qos0_wire_layout() {
        let p = Packet::Publish(Publish::qos0(topic("a/b"), b"1".to_vec()));
        let expected = [0x30, 0x06, 0x00, 0x03, b'a', b'/', b'b', b'1'];
        assert_eq!(encode_packet(&p).unwrap(), expected);
        assert_eq!(decode_packet(&expected).unwrap(), (p, 8));
    }

    #[test]
    fn puback_wire_layout() {
        let p = Packet::PubAck { packet_id: 7 };
        assert_eq!(encode_packet(&p).unwrap(), vec![0x40, 0x02, 0x00, 0x07]);
        assert_eq!(decode_packet(&[0x40, 0x02, 0x00, 0x07]).unwrap(), (p, 4));
    }

    #[test]
    fn connect_roundtrip() {
        let p = Packet::Connect { client_id: "c1".into(), keep_alive: 60 };
        let enc = encode_packet(&p).unwrap();
        assert_eq!(decode_packet(&enc).unwrap(), (p, enc.len()));
    }

    #[test]
    fn reserved_type_is_malformed() {
        assert_eq!(
            decode_packet(&[0xF0, 0x00]),
            Err(CodecError::Malformed("reserved packet type"))
        );
        assert_eq!(
            decode_packet(&[0x00, 0x00]),
            Err(CodecError::Malformed("reserved packet type"))
        );
    }

    #[test]
    fn out_of_subset_type_is_malformed() {
        // PUBREC carries mandatory flags 0; type 5 is outside the subset.
        assert_eq!(
            decode_packet(&[0x50, 0x02, 0x00, 0x01]),
            Err(CodecError::Malformed("packet type outside supported subset"))
        );
    }

    #[test]
    fn qos2_publish_rejected() {
        assert!(matches!(
            decode_packet(&[0x34, 0x05, 0x00, 0x01, b'a', 0x00, 0x01]),
            Err(CodecError::Malformed("QoS 2 outside supported subset"))
        ));
    }

    #[test]
    fn wildcard_in_publish_topic_is_protocol_violation() {
        let bytes = [0x30, 0x05, 0x00, 0x03, b'a', b'/', b'+'];
        assert_eq!(
            decode_packet(&bytes),
            Err(CodecError::ProtocolViolation("wildcard in publish topic"))
        );
    }

    #[test]
    fn qos1_publish_needs_nonzero_packet_id() {
        let missing = Packet::Publish(Publish {
            topic: topic("a"),
            payload: vec![],
            qos: QoS::AtLeastOnce,
            packet_id: None,
            dup: false,
            retain: false,
        });
        assert!(matches!(
            encode_packet(&missing),
            Err(CodecError::InvalidPacket(_))
        ));
        // id 0 on the wire
        assert!(matches!(
            decode_packet(&[0x32, 0x05, 0x00, 0x01, b'a', 0x00, 0x00]),
            Err(CodecError::Malformed("packet id must be nonzero"))
        ));
    }

    #[test]
    fn subscribe_carries_invalid_filters_verbatim() {
        let p = Packet::Subscribe {
            packet_id: 2,
            entries: vec![
                ("dt/#".into(), QoS::AtLeastOnce),
                ("bad/#/x".into(), QoS::AtLeastOnce),
            ],
        };
        let enc = encode_packet(&p).unwrap();
        assert_eq!(decode_packet(&enc).unwrap(), (p, enc.len()));
    }

    #[test]
    fn subscribe_requested_qos2_clamps_to_1() {
        // packet id 1, filter "a", options byte 2
        let bytes = [0x82, 0x06, 0x00, 0x01, 0x00, 0x01, b'a', 0x02];
        let (p, _) = decode_packet(&bytes).unwrap();
        assert_eq!(
            p,
            Packet::Subscribe {
                packet_id: 1,
                entries: vec![("a".into(), QoS::AtLeastOnce)]
            }
        );
    }

    #[test]
    fn subscribe_flags_must_be_0010() {
        let bytes = [0x80, 0x06, 0x00, 0x01, 0x00, 0x01, b'a', 0x01];
        assert_eq!(
            decode_packet(&bytes),
            Err(CodecError::Malformed("invalid fixed-header flags"))
        );
    }

    #[test]
    fn suback_roundtrip_with_failure_code() {
        let p = Packet::SubAck {
            packet_id: 2,
            granted: vec![SubAckCode::GrantedQos1, SubAckCode::Failure],
        };
        let enc = encode_packet(&p).unwrap();
        assert_eq!(decode_packet(&enc).unwrap(), (p, enc.len()));
    }

    #[test]
    fn trailing_bytes_in_fixed_size_body_rejected() {
        // PUBACK with a 3-byte body
        assert_eq!(
            decode_packet(&[0x40, 0x03, 0x00, 0x07, 0xAA]),
            Err(CodecError::Malformed("trailing bytes after packet body"))
        );
    }

    #[test]
    fn every_proper_prefix_needs_more_data() {
        let packets = sample_packets();
        for p in &packets {
            let enc = encode_packet(p).unwrap();
            for split in 0..enc.len() {
                assert_eq!(
                    decode_packet(&enc[..split]),
                    Err(CodecError::NeedMoreData),
                    "prefix {split} of {p:?}"
                );
            }
        }
    }

    #[test]
    fn packet_buffer_reassembles_byte_by_byte() {
        let packets = sample_packets();
        let mut wire = Vec::new();
        for p in &packets {
            wire.extend_from_slice(&encode_packet(p).unwrap());
        }
        let mut buf = PacketBuffer::new();
        let mut decoded = Vec::new();
        for &b in &wire {
            buf.push_bytes(&[b]);
            while let Some(p) = buf.next_packet().unwrap() {
                decoded.push(p);
            }
        }
        assert_eq!(decoded, packets);
    }

    fn sample_packets() -> Vec<Packet> {
        vec![
            Packet::Connect { client_id: "c1".into(), keep_alive: 60 },
            Packet::ConnAck { return_code: ConnectReturnCode::Accepted },
            Packet::Publish(Publish::qos1(topic("dt/c1/data"), b"17......".to_vec(), 5)),
            Packet::Publish(Publish::qos0(topic("a//b"), vec![])),
            Packet::PubAck { packet_id: 5 },
            Packet::Subscribe {
                packet_id: 1,
                entries: vec![("dt/+/data".into(), QoS::AtLeastOnce)],
            },
            Packet::SubAck { packet_id: 1, granted: vec![SubAckCode::GrantedQos1] },
            Packet::PingReq,
            Packet::PingResp,
            Packet::Disconnect,
        ]
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_topic() -> impl Strategy<Value = Topic> {
            proptest::collection::vec("[a-z0-9]{0,6}", 1..5)
                .prop_map(|levels| levels.join("/"))
                .prop_filter_map("topic must be valid", |s| Topic::new(s).ok())
        }

        fn arb_packet() -> impl Strategy<Value = Packet> {
            let publish = (arb_topic(), proptest::collection::vec(any::<u8>(), 0..64))
                .prop_flat_map(|(t, payload)| {
                    prop_oneof![
                        Just(Packet::Publish(Publish::qos0(t.clone(), payload.clone()))),
                        (1..=u16::MAX).prop_map(move |id| {
                            Packet::Publish(Publish::qos1(t.clone(), payload.clone(), id))
                        }),
                    ]
                });
            prop_oneof![
                ("[a-zA-Z0-9]{0,23}", any::<u16>())
                    .prop_map(|(id, ka)| Packet::Connect { client_id: id, keep_alive: ka }),
                Just(Packet::ConnAck { return_code: ConnectReturnCode::Accepted }),
                publish,
                (1..=u16::MAX).prop_map(|id| Packet::PubAck { packet_id: id }),
                (
                    1..=u16::MAX,
                    proptest::collection::vec(("[a-z/+#]{1,12}", 0..=1u8), 1..4)
                )
                    .prop_map(|(id, raw)| Packet::Subscribe {
                        packet_id: id,
                        entries: raw
                            .into_iter()
                            .map(|(f, q)| (f, QoS::from_level(q).unwrap()))
                            .collect(),
                    }),
                Just(Packet::PingReq),
                Just(Packet::PingResp),
                Just(Packet::Disconnect),
            ]
        }

        proptest! {
            #[test]
            fn roundtrip(p in arb_packet()) {
                let enc = encode_packet(&p).unwrap();
                let (decoded, consumed) = decode_packet(&enc).unwrap();
                prop_assert_eq!(decoded, p);
                prop_assert_eq!(consumed, enc.len());
            }

            #[test]
            fn varint_roundtrip(n in 0..=MAX_REMAINING_LENGTH) {
                let enc = encode_remaining_length(n).unwrap();
                prop_assert_eq!(decode_remaining_length(&enc).unwrap(), (n, enc.len()));
            }
        }
    }
}
