//! Links between device clients and a broker.
//!
//! A [`BrokerEndpoint`] carries opaque frames: sealed records when the link
//! runs over the secure channel, raw MQTT bytes otherwise. The client owns
//! its end of the channel; the endpoint owns the broker's end.

use std::collections::{BTreeMap, VecDeque};
use std::io::{ErrorKind, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use rand::rngs::OsRng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::broker::{Action, Broker, ConnId, ConnectionInfo};
use crate::channel::{
    client_handshake_over, handshake, ChannelError, ChannelMetrics, ClientChannelConfig, EstablishedChannel,
    ServerChannelConfig,
};
use crate::mqtt::{encode_packet, StreamDecoder};

pub type LinkId = u64;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("secure channel handshake failed: {0}")]
    Handshake(ChannelError),
    #[error("listener does not accept {0} connections")]
    Mismatch(&'static str),
    #[error("link closed")]
    Closed,
    #[error("unknown link {0}")]
    UnknownLink(LinkId),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// A freshly opened link. `channel` is the client's end of the secure
/// channel, absent on plaintext links.
#[derive(Debug)]
pub struct Link {
    pub id: LinkId,
    pub channel: Option<EstablishedChannel>,
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct Inbound {
    pub frames: Vec<Vec<u8>>,
    pub closed: bool,
}

pub trait BrokerEndpoint {
    /// Opens a link, running the secure-channel handshake when `channel` is set.
    fn open(&mut self, channel: Option<&ClientChannelConfig>, now: u64) -> Result<Link, TransportError>;
    fn transmit(&mut self, link: LinkId, frame: &[u8], now: u64) -> Result<(), TransportError>;
    /// Frames received so far. With `wait`, blocks until at least one frame
    /// arrives or the link closes (where the transport can block at all).
    fn receive(&mut self, link: LinkId, wait: bool) -> Result<Inbound, TransportError>;
    fn close(&mut self, link: LinkId, now: u64);
    /// Lets time-driven broker work (keep-alive expiry) run up to `now`.
    fn advance(&mut self, _now: u64) {}
}

/// Splits a byte stream into length-prefixed records.
fn split_records(buf: &mut Vec<u8>, tag_len: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    loop {
        if buf.len() < 4 {
            return out;
        }
        let n = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
        let total = 4 + n + tag_len;
        if buf.len() < total {
            return out;
        }
        out.push(buf.drain(..total).collect());
    }
}

// --- in-process broker ------------------------------------------------------------

struct LocalLink {
    channel: Option<EstablishedChannel>,
    decoder: StreamDecoder,
    outbox: VecDeque<Vec<u8>>,
    closed: bool,
}

/// A broker reached through direct calls; time is whatever the caller says.
pub struct LocalBroker {
    broker: Broker,
    server: Option<ServerChannelConfig>,
    rng: ChaCha20Rng,
    links: BTreeMap<ConnId, LocalLink>,
    handshakes: Vec<ChannelMetrics>,
}

impl LocalBroker {
    /// `server` is the listener's side of the secure channel; `None` makes a
    /// plaintext listener.
    pub fn new(broker: Broker, server: Option<ServerChannelConfig>, seed: u64) -> Self {
        LocalBroker {
            broker,
            server,
            rng: ChaCha20Rng::seed_from_u64(seed),
            links: BTreeMap::new(),
            handshakes: Vec::new(),
        }
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn broker_mut(&mut self) -> &mut Broker {
        &mut self.broker
    }

    /// Wire metrics of every completed handshake, in order.
    pub fn handshakes(&self) -> &[ChannelMetrics] {
        &self.handshakes
    }

    /// First whole second at which a keep-alive sweep would expire someone.
    pub fn next_sweep_at(&self) -> Option<u64> {
        self.broker.next_deadline_ms().map(|ms| ms / 1000 + 1)
    }

    fn apply(&mut self, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Send(conn, packet) => {
                    let Some(link) = self.links.get_mut(&conn) else {
                        continue;
                    };
                    if link.closed {
                        continue;
                    }
                    let bytes = encode_packet(&packet).expect("broker emits encodable packets");
                    let frame = match &mut link.channel {
                        Some(ch) => ch.send(&bytes),
                        None => bytes,
                    };
                    link.outbox.push_back(frame);
                }
                Action::Close(conn, _) => {
                    if let Some(link) = self.links.get_mut(&conn) {
                        link.closed = true;
                    }
                }
            }
        }
    }

    fn drop_link(&mut self, id: LinkId) {
        if let Some(link) = self.links.get_mut(&id) {
            link.closed = true;
        }
        self.broker.close_connection(id);
    }
}

impl BrokerEndpoint for LocalBroker {
    fn open(&mut self, channel: Option<&ClientChannelConfig>, now: u64) -> Result<Link, TransportError> {
        let (client_end, server_end) = match (channel, &self.server) {
            (Some(cfg), Some(server)) => match handshake(cfg, server, now, &mut self.rng) {
                Ok(hs) => {
                    self.handshakes.push(hs.client.metrics);
                    (Some(hs.client), Some(hs.server))
                }
                Err(failure) => {
                    self.broker.record_handshake_failure(failure.reason.code(), now);
                    return Err(TransportError::Handshake(failure.reason));
                }
            },
            (None, None) => (None, None),
            (Some(_), None) => return Err(TransportError::Mismatch("secure")),
            (None, Some(_)) => return Err(TransportError::Mismatch("plaintext")),
        };
        let info = ConnectionInfo {
            secure: server_end.is_some(),
            peer_identity: server_end.as_ref().and_then(|c| c.peer_identity.clone()),
        };
        let id = self.broker.open_connection(info, now);
        self.links.insert(
            id,
            LocalLink {
                channel: server_end,
                decoder: StreamDecoder::default(),
                outbox: VecDeque::new(),
                closed: false,
            },
        );
        Ok(Link {
            id,
            channel: client_end,
        })
    }

    fn transmit(&mut self, id: LinkId, frame: &[u8], now: u64) -> Result<(), TransportError> {
        let link = self.links.get_mut(&id).ok_or(TransportError::UnknownLink(id))?;
        if link.closed {
            return Err(TransportError::Closed);
        }
        let plain = match &mut link.channel {
            Some(ch) => match ch.recv(frame) {
                Ok(p) => p,
                Err(_) => {
                    self.drop_link(id);
                    return Err(TransportError::Closed);
                }
            },
            None => frame.to_vec(),
        };
        link.decoder.push(&plain);
        while let Some(link) = self.links.get_mut(&id).filter(|l| !l.closed) {
            match link.decoder.next_packet() {
                Ok(Some(packet)) => {
                    let actions = self.broker.handle_packet(id, packet, now);
                    self.apply(actions);
                }
                Ok(None) => break,
                Err(_) => {
                    self.drop_link(id);
                    break;
                }
            }
        }
        Ok(())
    }

    fn receive(&mut self, id: LinkId, _wait: bool) -> Result<Inbound, TransportError> {
        let link = self.links.get_mut(&id).ok_or(TransportError::UnknownLink(id))?;
        Ok(Inbound {
            frames: link.outbox.drain(..).collect(),
            closed: link.closed,
        })
    }

    fn close(&mut self, id: LinkId, _now: u64) {
        self.links.remove(&id);
        self.broker.close_connection(id);
    }

    fn advance(&mut self, now: u64) {
        for id in self.broker.keep_alive_sweep(now) {
            if let Some(link) = self.links.get_mut(&id) {
                link.closed = true;
            }
        }
    }
}

// --- TCP -------------------------------------------------------------------------

struct TcpLink {
    stream: TcpStream,
    secure: bool,
    buf: Vec<u8>,
}

/// Client side of a real network connection to a broker listener.
pub struct TcpEndpoint {
    addr: String,
    links: BTreeMap<LinkId, TcpLink>,
    next: LinkId,
    timeout: Duration,
}

impl TcpEndpoint {
    pub fn new(addr: impl Into<String>) -> Self {
        TcpEndpoint {
            addr: addr.into(),
            links: BTreeMap::new(),
            next: 1,
            timeout: Duration::from_secs(10),
        }
    }
}

impl BrokerEndpoint for TcpEndpoint {
    fn open(&mut self, channel: Option<&ClientChannelConfig>, now: u64) -> Result<Link, TransportError> {
        let addr = self
            .addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| std::io::Error::new(ErrorKind::NotFound, "address did not resolve"))?;
        let mut stream = TcpStream::connect_timeout(&addr, self.timeout)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_nodelay(true)?;
        let client_end = match channel {
            Some(cfg) => Some(
                client_handshake_over(&mut stream, cfg, now, &mut OsRng)
                    .map_err(TransportError::Handshake)?
                    .0,
            ),
            None => None,
        };
        let id = self.next;
        self.next += 1;
        self.links.insert(
            id,
            TcpLink {
                stream,
                secure: client_end.is_some(),
                buf: Vec::new(),
            },
        );
        Ok(Link {
            id,
            channel: client_end,
        })
    }

    fn transmit(&mut self, id: LinkId, frame: &[u8], _now: u64) -> Result<(), TransportError> {
        let link = self.links.get_mut(&id).ok_or(TransportError::UnknownLink(id))?;
        link.stream.write_all(frame)?;
        Ok(())
    }

    fn receive(&mut self, id: LinkId, wait: bool) -> Result<Inbound, TransportError> {
        let timeout = self.timeout;
        let link = self.links.get_mut(&id).ok_or(TransportError::UnknownLink(id))?;
        let mut inbound = Inbound::default();
        link.stream
            .set_read_timeout(Some(if wait { timeout } else { Duration::from_millis(1) }))?;
        let mut chunk = [0u8; 4096];
        loop {
            match link.stream.read(&mut chunk) {
                Ok(0) => {
                    inbound.closed = true;
                    break;
                }
                Ok(n) => link.buf.extend_from_slice(&chunk[..n]),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => break,
                Err(e) => return Err(e.into()),
            }
            if link.secure {
                inbound
                    .frames
                    .extend(split_records(&mut link.buf, crate::channel::TAG_LEN));
            } else if !link.buf.is_empty() {
                inbound.frames.push(std::mem::take(&mut link.buf));
            }
            if !inbound.frames.is_empty() {
                // drain whatever else is already here without waiting again
                link.stream.set_read_timeout(Some(Duration::from_millis(1)))?;
            }
        }
        Ok(inbound)
    }

    fn close(&mut self, id: LinkId, _now: u64) {
        if let Some(link) = self.links.remove(&id) {
            let _ = link.stream.shutdown(std::net::Shutdown::Both);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_splitting_waits_for_whole_frames() {
        let mut buf = vec![0, 0, 0, 2, 9, 9, 1, 1, 0, 0];
        assert_eq!(split_records(&mut buf, 2), vec![vec![0, 0, 0, 2, 9, 9, 1, 1]]);
        assert_eq!(buf, vec![0, 0]);
        assert!(split_records(&mut buf, 2).is_empty());
    }
}
