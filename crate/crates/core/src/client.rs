//! Device client: per-scheme credentials, keep-alive pings, token minting
//! against a possibly skewed clock and the reconnect-to-refresh loop.
//!
//! The client is event driven. [`DeviceClient::next_wakeup`] says when it
//! next needs to act and [`DeviceClient::on_tick`] performs whatever is due,
//! so the same code runs under a simulated clock or a wall-clock loop.

use std::fmt;

use thiserror::Error;

use crate::channel::{ChannelMetrics, ClientChannelConfig, Credentials, EstablishedChannel};
use crate::jws::{compact_serialize, sign, ClaimsSet, JoseHeader, JwsError, SigningKey};
use crate::mqtt::{connack, encode_packet, Connect, Packet, StreamDecoder};
use crate::pki::Certificate;
use crate::transport::{BrokerEndpoint, LinkId, TransportError};

pub mod config;

#[derive(Debug, Clone)]
pub struct JwtSettings {
    pub key: SigningKey,
    pub kid: Option<String>,
    pub audience: String,
    pub token_lifetime: u64,
    pub refresh_margin: u64,
}

impl JwtSettings {
    pub fn new(key: SigningKey, audience: impl Into<String>) -> Self {
        JwtSettings {
            kid: key.key_id.clone(),
            key,
            audience: audience.into(),
            token_lifetime: 3600,
            refresh_margin: 300,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Scheme {
    /// No credentials at all.
    Anonymous,
    UsernamePassword {
        username: String,
        password: String,
    },
    MutualTls(Credentials),
    Jwt(JwtSettings),
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Anonymous => "anonymous",
            Scheme::UsernamePassword { .. } => "username-password",
            Scheme::MutualTls(_) => "mutual-tls",
            Scheme::Jwt(_) => "jwt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublishPlan {
    pub topic: String,
    pub interval: u64,
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub client_id: String,
    pub scheme: Scheme,
    pub keep_alive: u16,
    /// Roots for authenticating the broker; ignored on plaintext links.
    pub trusted_roots: Vec<Certificate>,
    pub secure: bool,
    pub reconnect_backoff: u64,
    /// Consecutive failed attempts after which the client gives up.
    pub max_retries: Option<u32>,
    pub subscriptions: Vec<String>,
    pub publish: Option<PublishPlan>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClientConfigError {
    #[error("refresh margin must be shorter than the token lifetime")]
    RefreshMargin,
    #[error("mutual TLS needs a secure link")]
    MutualTlsPlaintext,
    #[error("publish interval must be positive")]
    PublishInterval,
    #[error("client id must not be empty")]
    EmptyClientId,
}

impl ClientConfig {
    pub fn new(client_id: impl Into<String>, scheme: Scheme, trusted_roots: Vec<Certificate>) -> Self {
        ClientConfig {
            client_id: client_id.into(),
            scheme,
            keep_alive: 60,
            trusted_roots,
            secure: true,
            reconnect_backoff: 5,
            max_retries: None,
            subscriptions: Vec::new(),
            publish: None,
        }
    }

    pub fn validate(&self) -> Result<(), ClientConfigError> {
        if self.client_id.is_empty() {
            return Err(ClientConfigError::EmptyClientId);
        }
        match &self.scheme {
            Scheme::Jwt(j) if j.refresh_margin >= j.token_lifetime => return Err(ClientConfigError::RefreshMargin),
            Scheme::MutualTls(_) if !self.secure => return Err(ClientConfigError::MutualTlsPlaintext),
            _ => {}
        }
        if self.publish.as_ref().is_some_and(|p| p.interval == 0) {
            return Err(ClientConfigError::PublishInterval);
        }
        Ok(())
    }

    fn channel_config(&self) -> Option<ClientChannelConfig> {
        self.secure.then(|| ClientChannelConfig {
            trusted_roots: self.trusted_roots.clone(),
            credentials: match &self.scheme {
                Scheme::MutualTls(c) => Some(c.clone()),
                _ => None,
            },
        })
    }
}

/// The device's view of time: true time shifted by a fixed offset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClockSource {
    pub skew_offset: i64,
}

impl ClockSource {
    pub fn new(skew_offset: i64) -> Self {
        ClockSource { skew_offset }
    }

    pub fn now(&self, true_time: u64) -> i64 {
        true_time as i64 + self.skew_offset
    }
}

/// `iat` is the clock reading, `exp = iat + token_lifetime`.
pub fn mint_token(settings: &JwtSettings, clock_now: i64) -> Result<String, JwsError> {
    let mut claims = ClaimsSet::new(clock_now, clock_now + settings.token_lifetime as i64)?;
    claims.aud = Some(settings.audience.clone());
    let mut header = JoseHeader::new(settings.key.alg());
    header.kid = settings.kid.clone();
    Ok(compact_serialize(&sign(header, claims, &settings.key)?))
}

#[derive(Debug, Error)]
pub enum ConnectError {
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("connection refused, CONNACK code {0}")]
    Refused(u8),
    #[error("token minting failed: {0}")]
    Token(#[from] JwsError),
    #[error("protocol: {0}")]
    Protocol(String),
}

impl ConnectError {
    /// Short identifier used in activity logs.
    pub fn cause(&self) -> String {
        match self {
            ConnectError::Transport(TransportError::Handshake(e)) => format!("handshake:{}", e.code()),
            ConnectError::Transport(TransportError::Closed) => "link-closed".into(),
            ConnectError::Transport(TransportError::Mismatch(m)) => format!("listener-rejects-{m}"),
            ConnectError::Transport(_) => "transport-error".into(),
            ConnectError::Refused(code) => format!("connack-{code}"),
            ConnectError::Token(_) => "token-error".into(),
            ConnectError::Protocol(_) => "protocol-error".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActivityKind {
    Connect,
    Reconnect,
    Ping,
    Publish,
    Subscribe,
    Failure,
    Disconnect,
}

impl ActivityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActivityKind::Connect => "connect",
            ActivityKind::Reconnect => "reconnect",
            ActivityKind::Ping => "ping",
            ActivityKind::Publish => "publish",
            ActivityKind::Subscribe => "subscribe",
            ActivityKind::Failure => "failure",
            ActivityKind::Disconnect => "disconnect",
        }
    }
}

/// One activity log line. A `reconnect` is a successful re-establishment; its
/// cause is why the previous session ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivityEvent {
    pub t: u64,
    pub client_id: String,
    pub kind: ActivityKind,
    pub cause: String,
}

impl ActivityEvent {
    pub fn parse_line(line: &str) -> Result<Self, String> {
        let mut t = None;
        let mut client_id = None;
        let mut kind = None;
        let mut cause = None;
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| format!("bad field {field:?}"))?;
            match k {
                "t" => t = Some(v.parse().map_err(|e| format!("t: {e}"))?),
                "client" => client_id = Some(v.to_owned()),
                "kind" => {
                    kind = Some(
                        [
                            ActivityKind::Connect,
                            ActivityKind::Reconnect,
                            ActivityKind::Ping,
                            ActivityKind::Publish,
                            ActivityKind::Subscribe,
                            ActivityKind::Failure,
                            ActivityKind::Disconnect,
                        ]
                        .into_iter()
                        .find(|k| k.as_str() == v)
                        .ok_or_else(|| format!("unknown kind {v:?}"))?,
                    )
                }
                "cause" => cause = Some(v.to_owned()),
                other => return Err(format!("unknown field {other:?}")),
            }
        }
        Ok(ActivityEvent {
            t: t.ok_or("missing t")?,
            client_id: client_id.ok_or("missing client")?,
            kind: kind.ok_or("missing kind")?,
            cause: cause.ok_or("missing cause")?,
        })
    }
}

impl fmt::Display for ActivityEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t={} client={} kind={} cause={}",
            self.t,
            self.client_id,
            self.kind.as_str(),
            self.cause
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToBroker,
    FromBroker,
}

impl Direction {
    pub fn as_byte(self) -> u8 {
        match self {
            Direction::ToBroker => 0,
            Direction::FromBroker => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Direction::ToBroker),
            1 => Some(Direction::FromBroker),
            _ => None,
        }
    }
}

/// Plaintext MQTT frame as seen before the record layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceFrame {
    pub direction: Direction,
    pub bytes: Vec<u8>,
}

struct Live {
    link: LinkId,
    channel: Option<EstablishedChannel>,
    decoder: StreamDecoder,
    last_tx: u64,
    /// True time at which the token must be replaced.
    refresh_at: Option<u64>,
}

pub struct DeviceClient {
    config: ClientConfig,
    clock: ClockSource,
    live: Option<Live>,
    log: Vec<ActivityEvent>,
    trace: Vec<TraceFrame>,
    handshakes: Vec<ChannelMetrics>,
    inbox: Vec<(String, Vec<u8>)>,
    retry_at: Option<u64>,
    pending_cause: Option<String>,
    consecutive_failures: u32,
    next_publish: Option<u64>,
    publish_seq: u64,
    next_packet_id: u16,
    attempts: u32,
    successes: u32,
    started: bool,
    /// Logged once the next CONNACK accepts, ahead of follow-up activity.
    connect_note: Option<(ActivityKind, String)>,
}

impl DeviceClient {
    pub fn new(config: ClientConfig, clock: ClockSource) -> Result<Self, ClientConfigError> {
        config.validate()?;
        Ok(DeviceClient {
            config,
            clock,
            live: None,
            log: Vec::new(),
            trace: Vec::new(),
            handshakes: Vec::new(),
            inbox: Vec::new(),
            retry_at: None,
            pending_cause: None,
            consecutive_failures: 0,
            next_publish: None,
            publish_seq: 0,
            next_packet_id: 1,
            attempts: 0,
            successes: 0,
            started: false,
            connect_note: None,
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn clock(&self) -> ClockSource {
        self.clock
    }

    pub fn is_connected(&self) -> bool {
        self.live.is_some()
    }

    pub fn activity_log(&self) -> &[ActivityEvent] {
        &self.log
    }

    pub fn trace(&self) -> &[TraceFrame] {
        &self.trace
    }

    /// Wire metrics of every completed handshake.
    pub fn handshakes(&self) -> &[ChannelMetrics] {
        &self.handshakes
    }

    pub fn inbox(&self) -> &[(String, Vec<u8>)] {
        &self.inbox
    }

    pub fn connect_attempts(&self) -> u32 {
        self.attempts
    }

    pub fn connect_successes(&self) -> u32 {
        self.successes
    }

    pub fn reconnect_count(&self) -> usize {
        self.log.iter().filter(|e| e.kind == ActivityKind::Reconnect).count()
    }

    /// Has given up after `max_retries` consecutive failures.
    pub fn gave_up(&self) -> bool {
        self.started && self.live.is_none() && self.retry_at.is_none()
    }

    fn record(&mut self, t: u64, kind: ActivityKind, cause: impl Into<String>) {
        self.log.push(ActivityEvent {
            t,
            client_id: self.config.client_id.clone(),
            kind,
            cause: cause.into(),
        });
    }

    fn send<E: BrokerEndpoint>(&mut self, ep: &mut E, packet: &Packet, now: u64) -> Result<(), ConnectError> {
        let live = self
            .live
            .as_mut()
            .ok_or(ConnectError::Transport(TransportError::Closed))?;
        let bytes = encode_packet(packet).map_err(|e| ConnectError::Protocol(e.to_string()))?;
        self.trace.push(TraceFrame {
            direction: Direction::ToBroker,
            bytes: bytes.clone(),
        });
        let frame = match &mut live.channel {
            Some(ch) => ch.send(&bytes),
            None => bytes,
        };
        ep.transmit(live.link, &frame, now)?;
        live.last_tx = now;
        Ok(())
    }

    /// Collects packets from the broker. Publishes go to the inbox; the
    /// remaining packets are returned. `closed` reports the link going away.
    fn pump<E: BrokerEndpoint>(&mut self, ep: &mut E, wait: bool) -> Result<(Vec<Packet>, bool), ConnectError> {
        let live = self
            .live
            .as_mut()
            .ok_or(ConnectError::Transport(TransportError::Closed))?;
        let inbound = ep.receive(live.link, wait)?;
        for frame in inbound.frames {
            let plain = match &mut live.channel {
                Some(ch) => ch.recv(&frame).map_err(|e| ConnectError::Protocol(e.to_string()))?,
                None => frame,
            };
            live.decoder.push(&plain);
        }
        let mut packets = Vec::new();
        while let Some(p) = live
            .decoder
            .next_packet()
            .map_err(|e| ConnectError::Protocol(e.to_string()))?
        {
            self.trace.push(TraceFrame {
                direction: Direction::FromBroker,
                bytes: encode_packet(&p).expect("decoded packets re-encode"),
            });
            match p {
                Packet::Publish { topic, payload } => self.inbox.push((topic, payload)),
                other => packets.push(other),
            }
        }
        Ok((packets, inbound.closed))
    }

    /// Waits for a packet accepted by `want`, failing if the link closes first.
    fn expect<E: BrokerEndpoint>(
        &mut self,
        ep: &mut E,
        want: impl Fn(&Packet) -> bool,
    ) -> Result<Packet, ConnectError> {
        loop {
            let (packets, closed) = self.pump(ep, true)?;
            if let Some(p) = packets.into_iter().find(|p| want(p)) {
                return Ok(p);
            }
            if closed {
                return Err(ConnectError::Transport(TransportError::Closed));
            }
        }
    }

    fn build_connect(&self, now: u64) -> Result<Connect, ConnectError> {
        let (username, password) = match &self.config.scheme {
            Scheme::UsernamePassword { username, password } => {
                (Some(username.clone()), Some(password.as_bytes().to_vec()))
            }
            Scheme::Anonymous | Scheme::MutualTls(_) => (None, None),
            Scheme::Jwt(j) => (None, Some(mint_token(j, self.clock.now(now))?.into_bytes())),
        };
        Ok(Connect {
            client_id: self.config.client_id.clone(),
            username,
            password,
            keep_alive: self.config.keep_alive,
            clean_session: true,
        })
    }

    fn drop_link<E: BrokerEndpoint>(&mut self, ep: &mut E, now: u64) {
        if let Some(live) = self.live.take() {
            ep.close(live.link, now);
        }
    }

    /// Secure-channel handshake (if configured), CONNECT, and re-subscription.
    pub fn connect<E: BrokerEndpoint>(&mut self, ep: &mut E, now: u64) -> Result<(), ConnectError> {
        self.drop_link(ep, now);
        self.attempts += 1;
        let link = ep.open(self.config.channel_config().as_ref(), now)?;
        if let Some(ch) = &link.channel {
            self.handshakes.push(ch.metrics);
        }
        self.live = Some(Live {
            link: link.id,
            channel: link.channel,
            decoder: StreamDecoder::default(),
            last_tx: now,
            refresh_at: None,
        });
        let result = self.finish_connect(ep, now);
        if result.is_err() {
            self.drop_link(ep, now);
        }
        result
    }

    fn finish_connect<E: BrokerEndpoint>(&mut self, ep: &mut E, now: u64) -> Result<(), ConnectError> {
        let connect = self.build_connect(now)?;
        self.send(ep, &Packet::Connect(connect), now)?;
        match self.expect(ep, |p| matches!(p, Packet::Connack { .. }))? {
            Packet::Connack {
                return_code: connack::ACCEPTED,
                ..
            } => {}
            Packet::Connack { return_code, .. } => return Err(ConnectError::Refused(return_code)),
            _ => unreachable!(),
        }
        self.successes += 1;
        if let Some((kind, cause)) = self.connect_note.take() {
            self.record(now, kind, cause);
        }
        if let Scheme::Jwt(j) = &self.config.scheme {
            // exp - margin on the device clock, mapped back to true time
            self.live.as_mut().unwrap().refresh_at = Some(now + j.token_lifetime - j.refresh_margin);
        }
        if !self.config.subscriptions.is_empty() {
            let packet_id = self.next_packet_id;
            self.next_packet_id = self.next_packet_id.checked_add(1).unwrap_or(1);
            let filters = self.config.subscriptions.iter().map(|f| (f.clone(), 0)).collect();
            self.send(ep, &Packet::Subscribe { packet_id, filters }, now)?;
            let Packet::Suback { return_codes, .. } = self.expect(
                ep,
                |p| matches!(p, Packet::Suback { packet_id: id, .. } if *id == packet_id),
            )?
            else {
                unreachable!()
            };
            let granted = return_codes.iter().filter(|c| **c == 0).count();
            self.record(
                now,
                ActivityKind::Subscribe,
                format!("granted-{granted}-of-{}", return_codes.len()),
            );
        }
        if let Some(plan) = &self.config.publish {
            self.next_publish.get_or_insert(now + plan.interval);
        }
        Ok(())
    }

    /// Sends one publish now.
    pub fn publish<E: BrokerEndpoint>(
        &mut self,
        ep: &mut E,
        topic: &str,
        payload: Vec<u8>,
        now: u64,
    ) -> Result<(), ConnectError> {
        self.send(
            ep,
            &Packet::Publish {
                topic: topic.to_owned(),
                payload,
            },
            now,
        )?;
        self.record(now, ActivityKind::Publish, topic);
        Ok(())
    }

    /// Graceful shutdown.
    pub fn disconnect<E: BrokerEndpoint>(&mut self, ep: &mut E, now: u64) {
        if self.live.is_some() {
            let _ = self.send(ep, &Packet::Disconnect, now);
            self.drop_link(ep, now);
            self.record(now, ActivityKind::Disconnect, "shutdown");
        }
        self.retry_at = None;
    }

    /// Next instant at which the client has something to do.
    pub fn next_wakeup(&self) -> Option<u64> {
        match &self.live {
            Some(live) => {
                let ping = (self.config.keep_alive > 0).then(|| live.last_tx + self.config.keep_alive as u64);
                [ping, live.refresh_at, self.next_publish].into_iter().flatten().min()
            }
            None => self.retry_at,
        }
    }

    /// First connection attempt; failures are retried from `on_tick`.
    pub fn start<E: BrokerEndpoint>(&mut self, ep: &mut E, now: u64) {
        self.started = true;
        self.connect_note = Some((ActivityKind::Connect, "initial".into()));
        if let Err(e) = self.connect(ep, now) {
            self.connect_note = None;
            self.fail(e, "initial", now);
        }
    }

    fn fail(&mut self, err: ConnectError, cause_of_attempt: &str, now: u64) {
        self.record(now, ActivityKind::Failure, err.cause());
        self.consecutive_failures += 1;
        self.pending_cause = Some(cause_of_attempt.to_owned());
        let exhausted = self.config.max_retries.is_some_and(|m| self.consecutive_failures > m);
        self.retry_at = (!exhausted).then_some(now + self.config.reconnect_backoff);
    }

    fn reconnect<E: BrokerEndpoint>(&mut self, ep: &mut E, cause: &str, now: u64) {
        // a client whose first attempt failed is connecting, not reconnecting
        let kind = if self.successes == 0 {
            ActivityKind::Connect
        } else {
            ActivityKind::Reconnect
        };
        self.connect_note = Some((kind, cause.to_owned()));
        match self.connect(ep, now) {
            Ok(()) => {
                self.consecutive_failures = 0;
                self.retry_at = None;
            }
            Err(e) => {
                self.connect_note = None;
                self.fail(e, cause, now);
            }
        }
    }

    /// Reads whatever the broker has sent without acting on timers. Returns
    /// false if the link turned out to be gone (the next tick reconnects).
    pub fn poll<E: BrokerEndpoint>(&mut self, ep: &mut E, now: u64) -> bool {
        if self.live.is_none() {
            return false;
        }
        match self.pump(ep, false) {
            Ok((_, false)) => true,
            _ => {
                self.drop_link(ep, now);
                self.record(now, ActivityKind::Failure, "connection-lost");
                self.pending_cause = Some("connection-lost".into());
                self.retry_at = Some(now);
                false
            }
        }
    }

    /// Performs everything due at `now`.
    pub fn on_tick<E: BrokerEndpoint>(&mut self, ep: &mut E, now: u64) {
        if self.live.is_none() {
            if self.retry_at.is_some_and(|t| t <= now) {
                let cause = self.pending_cause.take().unwrap_or_else(|| "retry".into());
                self.reconnect(ep, &cause, now);
            }
            return;
        }
        match self.pump(ep, false) {
            Ok((_, false)) => {}
            Ok((_, true)) | Err(_) => {
                self.drop_link(ep, now);
                self.record(now, ActivityKind::Failure, "connection-lost");
                self.reconnect(ep, "connection-lost", now);
                return;
            }
        }
        let live = self.live.as_ref().unwrap();
        if live.refresh_at.is_some_and(|t| t <= now) {
            let _ = self.send(ep, &Packet::Disconnect, now);
            self.drop_link(ep, now);
            self.reconnect(ep, "token-refresh", now);
            return;
        }
        if let (Some(t), Some(plan)) = (self.next_publish, self.config.publish.clone()) {
            if t <= now {
                self.publish_seq += 1;
                let payload = format!("{}:{}", self.config.client_id, self.publish_seq).into_bytes();
                self.next_publish = Some(now + plan.interval);
                if self.publish(ep, &plan.topic, payload, now).is_err() {
                    self.drop_link(ep, now);
                    self.record(now, ActivityKind::Failure, "connection-lost");
                    self.reconnect(ep, "connection-lost", now);
                    return;
                }
            }
        }
        let live = self.live.as_ref().unwrap();
        if self.config.keep_alive > 0 && live.last_tx + self.config.keep_alive as u64 <= now {
            let ok = self.send(ep, &Packet::Pingreq, now).is_ok()
                && self.expect(ep, |p| matches!(p, Packet::Pingresp)).is_ok();
            if ok {
                self.record(now, ActivityKind::Ping, "keep-alive");
            } else {
                self.drop_link(ep, now);
                self.record(now, ActivityKind::Failure, "connection-lost");
                self.reconnect(ep, "connection-lost", now);
            }
        }
    }

    /// Drives the client alone until `until`, letting the endpoint run its
    /// time-based work at each step.
    pub fn maintain<E: BrokerEndpoint>(&mut self, ep: &mut E, until: u64) -> &[ActivityEvent] {
        while let Some(t) = self.next_wakeup() {
            if t > until {
                break;
            }
            ep.advance(t);
            self.on_tick(ep, t);
        }
        ep.advance(until);
        &self.log
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::{AclPolicy, AuthMode, AuthSchemeConfig, Broker, IamStore, IdentityRecord, PasswordHash};
    use crate::channel::ServerChannelConfig;
    use crate::jws::{parse_compact, Algorithm};
    use crate::pki::{issue, self_sign, CertChain, Validity};
    use crate::transport::LocalBroker;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const T0: u64 = 1_700_000_000;

    struct Pki {
        root: Certificate,
        server: ServerChannelConfig,
    }

    fn pki(rng: &mut ChaCha20Rng, require_client_cert: bool) -> Pki {
        let validity = Validity::new(T0 - 1000, T0 + 10 * 86_400).unwrap();
        let root_key = SigningKey::generate_es256(rng);
        let root = self_sign("root", &root_key, validity).unwrap();
        let server_key = SigningKey::generate_es256(rng);
        let leaf = issue(&root, &root_key, "broker", &server_key.verification_key(), validity).unwrap();
        Pki {
            root: root.clone(),
            server: ServerChannelConfig {
                credentials: Credentials {
                    chain: CertChain::new(vec![leaf]).unwrap(),
                    key: server_key,
                },
                require_client_cert,
                client_roots: vec![root],
            },
        }
    }

    fn jwt_setup(skew: i64) -> (LocalBroker, DeviceClient) {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let p = pki(&mut rng, false);
        let key = SigningKey::generate_es256(&mut rng).with_key_id("k1");
        let mut iam = IamStore::new();
        iam.register_identity(
            "dev-1",
            IdentityRecord {
                verification_keys: [key.verification_key()].into(),
                ..Default::default()
            },
        )
        .unwrap();
        let mut cfg = AuthSchemeConfig::new(AuthMode::Jwt);
        cfg.jwt_policy.required_aud = Some("fleet".into());
        let ep = LocalBroker::new(Broker::new(cfg, iam), Some(p.server), 1);
        let client = DeviceClient::new(
            ClientConfig::new("dev-1", Scheme::Jwt(JwtSettings::new(key, "fleet")), vec![p.root]),
            ClockSource::new(skew),
        )
        .unwrap();
        (ep, client)
    }

    #[test]
    fn mint_token_lifetime_and_determinism() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let s = JwtSettings::new(SigningKey::generate_es256(&mut rng).with_key_id("k"), "aud");
        let t = parse_compact(&mint_token(&s, 1000).unwrap()).unwrap();
        assert_eq!(t.claims.exp - t.claims.iat, 3600);
        assert_eq!(t.claims.aud.as_deref(), Some("aud"));
        assert_eq!(t.header.kid.as_deref(), Some("k"));
        assert_eq!(mint_token(&s, 1000).unwrap(), mint_token(&s, 1000).unwrap());
        let later = parse_compact(&mint_token(&s, 1001).unwrap()).unwrap();
        assert_ne!(later.claims.iat, t.claims.iat);
        assert_ne!(later.signature, t.signature);

        let hs = JwtSettings::new(SigningKey::hs256(b"secret".to_vec()), "aud");
        assert_eq!(hs.key.alg(), Algorithm::Hs256);
        assert_eq!(mint_token(&hs, 5).unwrap(), mint_token(&hs, 5).unwrap());
    }

    #[test]
    fn config_validation() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut s = JwtSettings::new(SigningKey::generate_es256(&mut rng), "aud");
        s.refresh_margin = 3600;
        let cfg = ClientConfig::new("c", Scheme::Jwt(s), vec![]);
        assert_eq!(cfg.validate(), Err(ClientConfigError::RefreshMargin));
    }

    #[test]
    fn jwt_connects_with_zero_skew_and_fails_far_ahead() {
        let (mut ep, mut c) = jwt_setup(0);
        c.connect(&mut ep, T0).unwrap();
        assert!(c.is_connected());

        let (mut ep, mut c) = jwt_setup(1200);
        let err = c.connect(&mut ep, T0).unwrap_err();
        assert!(matches!(err, ConnectError::Refused(5)));
        let denial = ep.broker().audit_log().last().unwrap();
        assert_eq!(denial.reason.as_deref(), Some("iat-skew"));
    }

    #[test]
    fn six_hour_refresh_schedule() {
        let (mut ep, mut c) = jwt_setup(0);
        c.start(&mut ep, T0);
        c.maintain(&mut ep, T0 + 6 * 3600);
        let times: Vec<u64> = c
            .activity_log()
            .iter()
            .filter(|e| e.kind == ActivityKind::Reconnect)
            .map(|e| e.t - T0)
            .collect();
        assert_eq!(times, vec![3300, 6600, 9900, 13200, 16500, 19800]);
        assert!(c.activity_log().iter().all(|e| e.kind != ActivityKind::Failure));
    }

    #[test]
    fn idle_client_pings_and_is_never_swept() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let p = pki(&mut rng, false);
        let mut iam = IamStore::new();
        iam.register_identity(
            "u",
            IdentityRecord {
                password: Some(PasswordHash::new(b"pw", &mut rng)),
                acl: AclPolicy::default(),
                ..Default::default()
            },
        )
        .unwrap();
        let mut ep = LocalBroker::new(
            Broker::new(AuthSchemeConfig::new(AuthMode::UsernamePassword), iam),
            Some(p.server),
            2,
        );
        let scheme = Scheme::UsernamePassword {
            username: "u".into(),
            password: "pw".into(),
        };
        let mut c = DeviceClient::new(ClientConfig::new("u", scheme, vec![p.root]), ClockSource::default()).unwrap();
        c.start(&mut ep, T0);
        c.maintain(&mut ep, T0 + 3600);
        let pings: Vec<u64> = c
            .activity_log()
            .iter()
            .filter(|e| e.kind == ActivityKind::Ping)
            .map(|e| e.t)
            .collect();
        assert_eq!(pings.len(), 60);
        let mut last = T0;
        for t in pings {
            assert!(t - last <= 60);
            last = t;
        }
        assert_eq!(c.reconnect_count(), 0);
        assert!(ep.broker().sessions().count() == 1);
    }

    #[test]
    fn activity_line_format() {
        let e = ActivityEvent {
            t: 3300,
            client_id: "d".into(),
            kind: ActivityKind::Reconnect,
            cause: "token-refresh".into(),
        };
        assert_eq!(e.to_string(), "t=3300 client=d kind=reconnect cause=token-refresh");
        assert_eq!(ActivityEvent::parse_line(&e.to_string()).unwrap(), e);
        assert!(ActivityEvent::parse_line("t=1 client=d kind=nap cause=x").is_err());
    }

    #[test]
    fn retries_stop_after_limit() {
        let (mut ep, mut c) = jwt_setup(1200);
        c.config.max_retries = Some(2);
        c.start(&mut ep, T0);
        c.maintain(&mut ep, T0 + 600);
        assert_eq!(c.connect_attempts(), 3);
        assert!(c.gave_up());
    }
}
