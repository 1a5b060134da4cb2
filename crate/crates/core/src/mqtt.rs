//! MQTT 3.1.1 wire codec for the packets the authentication flows use, plus
//! topic and topic-filter rules.
//!
//! Only QoS 0 publishes are supported. CONNECT never carries a will.

use thiserror::Error;

pub const MAX_REMAINING_LENGTH: usize = 268_435_455;
pub const PROTOCOL_NAME: &str = "MQTT";
pub const PROTOCOL_LEVEL: u8 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("remaining length {0} out of range")]
    LengthOutOfRange(usize),
    #[error("remaining length uses more than 4 bytes")]
    LengthTooLong,
    #[error("truncated input")]
    Truncated,
    #[error("unsupported packet type {0}")]
    UnknownPacketType(u8),
    #[error("reserved flags {flags:#x} misused for packet type {packet_type}")]
    ReservedFlags { packet_type: u8, flags: u8 },
    #[error("bad protocol name {0:?}")]
    BadProtocolName(String),
    #[error("unsupported protocol level {0}")]
    BadProtocolLevel(u8),
    #[error("invalid UTF-8 string")]
    InvalidUtf8,
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
    #[error("client id must not be empty")]
    EmptyClientId,
    #[error("invalid topic {0:?}")]
    InvalidTopic(String),
    #[error("invalid topic filter {0:?}")]
    InvalidFilter(String),
    #[error("field longer than 65535 bytes")]
    FieldTooLong,
}

pub type Result<T> = std::result::Result<T, CodecError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PacketType {
    Connect = 1,
    Connack = 2,
    Publish = 3,
    Subscribe = 8,
    Suback = 9,
    Pingreq = 12,
    Pingresp = 13,
    Disconnect = 14,
}

impl PacketType {
    pub fn from_nibble(value: u8) -> Result<Self> {
        Ok(match value {
            1 => PacketType::Connect,
            2 => PacketType::Connack,
            3 => PacketType::Publish,
            8 => PacketType::Subscribe,
            9 => PacketType::Suback,
            12 => PacketType::Pingreq,
            13 => PacketType::Pingresp,
            14 => PacketType::Disconnect,
            other => return Err(CodecError::UnknownPacketType(other)),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            PacketType::Connect => "CONNECT",
            PacketType::Connack => "CONNACK",
            PacketType::Publish => "PUBLISH",
            PacketType::Subscribe => "SUBSCRIBE",
            PacketType::Suback => "SUBACK",
            PacketType::Pingreq => "PINGREQ",
            PacketType::Pingresp => "PINGRESP",
            PacketType::Disconnect => "DISCONNECT",
        }
    }

    /// Flags every packet of this type must carry in the low nibble.
    fn required_flags(self) -> Option<u8> {
        match self {
            PacketType::Publish => None,
            PacketType::Subscribe => Some(0b0010),
            _ => Some(0),
        }
    }
}

/// CONNACK return codes used by the broker.
pub mod connack {
    pub const ACCEPTED: u8 = 0;
    pub const BAD_USERNAME_OR_PASSWORD: u8 = 4;
    pub const NOT_AUTHORIZED: u8 = 5;
}

pub const SUBACK_FAILURE: u8 = 0x80;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub client_id: String,
    pub username: Option<String>,
    pub password: Option<Vec<u8>>,
    pub keep_alive: u16,
    pub clean_session: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect(Connect),
    Connack { session_present: bool, return_code: u8 },
    Publish { topic: String, payload: Vec<u8> },
    Subscribe { packet_id: u16, filters: Vec<(String, u8)> },
    Suback { packet_id: u16, return_codes: Vec<u8> },
    Pingreq,
    Pingresp,
    Disconnect,
}

impl Packet {
    pub fn packet_type(&self) -> PacketType {
        match self {
            Packet::Connect(_) => PacketType::Connect,
            Packet::Connack { .. } => PacketType::Connack,
            Packet::Publish { .. } => PacketType::Publish,
            Packet::Subscribe { .. } => PacketType::Subscribe,
            Packet::Suback { .. } => PacketType::Suback,
            Packet::Pingreq => PacketType::Pingreq,
            Packet::Pingresp => PacketType::Pingresp,
            Packet::Disconnect => PacketType::Disconnect,
        }
    }
}

// --- remaining length -------------------------------------------------------

pub fn encode_remaining_length(mut n: usize) -> Result<Vec<u8>> {
    if n > MAX_REMAINING_LENGTH {
        return Err(CodecError::LengthOutOfRange(n));
    }
    let mut out = Vec::with_capacity(4);
    loop {
        let mut byte = (n % 128) as u8;
        n /= 128;
        if n > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if n == 0 {
            return Ok(out);
        }
    }
}

/// Returns `(value, bytes consumed)`.
pub fn decode_remaining_length(bytes: &[u8]) -> Result<(usize, usize)> {
    let mut value = 0usize;
    let mut multiplier = 1usize;
    for (i, &byte) in bytes.iter().enumerate() {
        if i == 4 {
            return Err(CodecError::LengthTooLong);
        }
        value += (byte & 0x7F) as usize * multiplier;
        if byte & 0x80 == 0 {
            return Ok((value, i + 1));
        }
        multiplier *= 128;
    }
    if bytes.len() >= 4 {
        Err(CodecError::LengthTooLong)
    } else {
        Err(CodecError::Truncated)
    }
}

// --- topics -----------------------------------------------------------------

pub fn validate_topic(topic: &str) -> Result<()> {
    if topic.is_empty() || topic.len() > u16::MAX as usize || topic.contains(['+', '#', '\0']) {
        return Err(CodecError::InvalidTopic(topic.to_owned()));
    }
    Ok(())
}

pub fn validate_filter(filter: &str) -> Result<()> {
    let bad = || CodecError::InvalidFilter(filter.to_owned());
    if filter.is_empty() || filter.len() > u16::MAX as usize || filter.contains('\0') {
        return Err(bad());
    }
    let segments: Vec<&str> = filter.split('/').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        match *seg {
            "+" => {}
            "#" if last => {}
            s if s.contains(['+', '#']) => return Err(bad()),
            _ => {}
        }
    }
    Ok(())
}

/// Segment-wise match: `+` takes exactly one segment, `#` any remaining
/// suffix including none.
pub fn topic_matches(filter: &str, topic: &str) -> bool {
    let mut filter_segments = filter.split('/');
    let mut topic_segments = topic.split('/');
    loop {
        match (filter_segments.next(), topic_segments.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => {}
            (Some(f), Some(t)) if f == t => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}

/// True when every topic matched by `requested` is also matched by `allowed`.
pub fn filter_covers(allowed: &str, requested: &str) -> bool {
    let allowed: Vec<&str> = allowed.split('/').collect();
    let requested: Vec<&str> = requested.split('/').collect();
    // every topic has at least one level, so `+/#` is as wide as `#`
    if allowed == ["+", "#"] && requested == ["#"] {
        return true;
    }
    covers(&allowed, &requested)
}

fn covers(allowed: &[&str], requested: &[&str]) -> bool {
    match (allowed.first(), requested.first()) {
        (Some(&"#"), _) => true,
        (None, None) => true,
        (None, Some(_)) | (Some(_), None) => false,
        (Some(_), Some(&"#")) => false,
        (Some(&"+"), Some(_)) => covers(&allowed[1..], &requested[1..]),
        (Some(a), Some(r)) => a == r && covers(&allowed[1..], &requested[1..]),
    }
}

// --- encoding ---------------------------------------------------------------

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_bytes(out, s.as_bytes())
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    let len = u16::try_from(b.len()).map_err(|_| CodecError::FieldTooLong)?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(b);
    Ok(())
}

pub fn encode_packet(packet: &Packet) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    let mut flags = 0u8;
    match packet {
        Packet::Connect(c) => {
            if c.client_id.is_empty() {
                return Err(CodecError::EmptyClientId);
            }
            put_str(&mut body, PROTOCOL_NAME)?;
            body.push(PROTOCOL_LEVEL);
            let mut connect_flags = 0u8;
            if c.username.is_some() {
                connect_flags |= 0x80;
            }
            if c.password.is_some() {
                connect_flags |= 0x40;
            }
            if c.clean_session {
                connect_flags |= 0x02;
            }
            body.push(connect_flags);
            body.extend_from_slice(&c.keep_alive.to_be_bytes());
            put_str(&mut body, &c.client_id)?;
            if let Some(u) = &c.username {
                put_str(&mut body, u)?;
            }
            if let Some(p) = &c.password {
                put_bytes(&mut body, p)?;
            }
        }
        Packet::Connack {
            session_present,
            return_code,
        } => {
            if *return_code > 5 {
                return Err(CodecError::Malformed("CONNACK return code above 5"));
            }
            body.push(u8::from(*session_present));
            body.push(*return_code);
        }
        Packet::Publish { topic, payload } => {
            validate_topic(topic)?;
            put_str(&mut body, topic)?;
            body.extend_from_slice(payload);
        }
        Packet::Subscribe { packet_id, filters } => {
            flags = 0b0010;
            if filters.is_empty() {
                return Err(CodecError::Malformed("SUBSCRIBE without filters"));
            }
            body.extend_from_slice(&packet_id.to_be_bytes());
            for (filter, qos) in filters {
                validate_filter(filter)?;
                if *qos > 2 {
                    return Err(CodecError::Malformed("requested QoS above 2"));
                }
                put_str(&mut body, filter)?;
                body.push(*qos);
            }
        }
        Packet::Suback {
            packet_id,
            return_codes,
        } => {
            body.extend_from_slice(&packet_id.to_be_bytes());
            body.extend_from_slice(return_codes);
        }
        Packet::Pingreq | Packet::Pingresp | Packet::Disconnect => {}
    }
    let mut out = Vec::with_capacity(body.len() + 5);
    out.push(((packet.packet_type() as u8) << 4) | flags);
    out.extend(encode_remaining_length(body.len())?);
    out.extend(body);
    Ok(out)
}

// --- decoding ---------------------------------------------------------------

struct Body<'a> {
    buf: &'a [u8],
}

impl<'a> Body<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(CodecError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let len = self.u16()? as usize;
        self.take(len)
    }

    fn string(&mut self) -> Result<String> {
        std::str::from_utf8(self.bytes()?)
            .map(str::to_owned)
            .map_err(|_| CodecError::InvalidUtf8)
    }

    fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }

    fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(CodecError::Malformed("trailing bytes inside packet"))
        }
    }
}

/// Decodes one packet from the front of `bytes`, returning it with the
/// number of bytes consumed. Never looks beyond the declared remaining length.
pub fn decode_packet(bytes: &[u8]) -> Result<(Packet, usize)> {
    let first = *bytes.first().ok_or(CodecError::Truncated)?;
    let packet_type = PacketType::from_nibble(first >> 4)?;
    let flags = first & 0x0F;
    if let Some(required) = packet_type.required_flags() {
        if flags != required {
            return Err(CodecError::ReservedFlags {
                packet_type: first >> 4,
                flags,
            });
        }
    }
    let (remaining, len_bytes) = decode_remaining_length(&bytes[1..])?;
    let start = 1 + len_bytes;
    let end = start + remaining;
    if bytes.len() < end {
        return Err(CodecError::Truncated);
    }
    let mut body = Body {
        buf: &bytes[start..end],
    };
    let packet = match packet_type {
        PacketType::Connect => decode_connect(&mut body)?,
        PacketType::Connack => {
            let ack_flags = body.u8()?;
            if ack_flags & 0xFE != 0 {
                return Err(CodecError::Malformed("reserved CONNACK flag bits set"));
            }
            let return_code = body.u8()?;
            if return_code > 5 {
                return Err(CodecError::Malformed("CONNACK return code above 5"));
            }
            Packet::Connack {
                session_present: ack_flags == 1,
                return_code,
            }
        }
        PacketType::Publish => {
            if flags != 0 {
                // QoS, DUP and RETAIN are all outside the supported subset.
                return Err(CodecError::ReservedFlags { packet_type: 3, flags });
            }
            let topic = body.string()?;
            validate_topic(&topic)?;
            Packet::Publish {
                topic,
                payload: body.rest().to_vec(),
            }
        }
        PacketType::Subscribe => {
            let packet_id = body.u16()?;
            let mut filters = Vec::new();
            while !body.buf.is_empty() {
                let filter = body.string()?;
                validate_filter(&filter)?;
                let qos = body.u8()?;
                if qos > 2 {
                    return Err(CodecError::Malformed("requested QoS above 2"));
                }
                filters.push((filter, qos));
            }
            if filters.is_empty() {
                return Err(CodecError::Malformed("SUBSCRIBE without filters"));
            }
            Packet::Subscribe { packet_id, filters }
        }
        PacketType::Suback => {
            let packet_id = body.u16()?;
            Packet::Suback {
                packet_id,
                return_codes: body.rest().to_vec(),
            }
        }
        PacketType::Pingreq => Packet::Pingreq,
        PacketType::Pingresp => Packet::Pingresp,
        PacketType::Disconnect => Packet::Disconnect,
    };
    body.finish()?;
    Ok((packet, end))
}

fn decode_connect(body: &mut Body<'_>) -> Result<Packet> {
    let name = body.string()?;
    if name != PROTOCOL_NAME {
        return Err(CodecError::BadProtocolName(name));
    }
    let level = body.u8()?;
    if level != PROTOCOL_LEVEL {
        return Err(CodecError::BadProtocolLevel(level));
    }
    let flags = body.u8()?;
    if flags & 0x01 != 0 {
        return Err(CodecError::Malformed("reserved connect flag set"));
    }
    if flags & 0b0011_1100 != 0 {
        return Err(CodecError::Malformed("will is not supported"));
    }
    let keep_alive = body.u16()?;
    let client_id = body.string()?;
    if client_id.is_empty() {
        return Err(CodecError::EmptyClientId);
    }
    let username = if flags & 0x80 != 0 { Some(body.string()?) } else { None };
    let password = if flags & 0x40 != 0 {
        Some(body.bytes()?.to_vec())
    } else {
        None
    };
    Ok(Packet::Connect(Connect {
        client_id,
        username,
        password,
        keep_alive,
        clean_session: flags & 0x02 != 0,
    }))
}

/// Incremental decoder over a byte stream.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
}

impl StreamDecoder {
    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete packet, `Ok(None)` while more bytes are needed.
    pub fn next_packet(&mut self) -> Result<Option<Packet>> {
        match decode_packet(&self.buf) {
            Ok((packet, used)) => {
                self.buf.drain(..used);
                Ok(Some(packet))
            }
            Err(CodecError::Truncated) => Ok(None),
            Err(e) => Err(e),
        }
    }
}
