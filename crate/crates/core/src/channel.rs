//! A desk-scale model of a TLS 1.2 style handshake with optional client
//! certificates.
//!
//! This is **not** a production transport. Signatures, certificate chain
//! checks, ephemeral P-256 Diffie-Hellman and transcript hashing are real;
//! record protection is a SHA-256 keystream with an HMAC-SHA-256 tag per
//! frame, and there is no cipher-suite or version negotiation, renegotiation
//! or resumption.
//!
//! Message flow:
//!
//! ```text
//! client                                   server
//! ClientHello          -------->
//!                      <--------  ServerHello
//!                                 Certificate
//!                                 ServerKeyExchange
//!                                 CertificateRequest*
//!                                 ServerHelloDone
//! Certificate*
//! ClientKeyExchange
//! CertificateVerify*
//! Finished             -------->
//!                      <--------  Finished
//! ```
//!
//! Every message before the two `Finished` messages travels in cleartext.

use std::fmt;
use std::io::{Read, Write};

use hkdf::Hkdf;
use p256::ecdh::EphemeralSecret;
use p256::elliptic_curve::sec1::ToEncodedPoint;
use p256::PublicKey;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::jws::{hmac_sha256, SigningKey};
use crate::pki::{verify_chain_any, CertChain, Certificate, ChainError};

const RANDOM_LEN: usize = 32;
/// Length of the integrity tag closing each record frame.
pub const TAG_LEN: usize = 32;
/// Largest accepted handshake message or record payload.
const MAX_MESSAGE: usize = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("server chain invalid: {0}")]
    ServerChainInvalid(ChainError),
    #[error("server key exchange signature invalid")]
    ServerSignatureInvalid,
    #[error("client certificate required but absent")]
    ClientCertRequiredButAbsent,
    #[error("client chain invalid: {0}")]
    ClientChainInvalid(ChainError),
    #[error("certificate verify failed")]
    CertificateVerifyFailed,
    #[error("finished verification failed")]
    FinishedMismatch,
    #[error("unexpected {got} while waiting for {expected}")]
    UnexpectedMessage { expected: &'static str, got: String },
    #[error("malformed handshake message: {0}")]
    Malformed(String),
    #[error("integrity check failed")]
    IntegrityCheckFailed,
    #[error("io: {0}")]
    Io(String),
}

impl ChannelError {
    /// Short, stable identifier used in logs and reports.
    pub fn code(&self) -> &'static str {
        match self {
            ChannelError::ServerChainInvalid(_) => "server-chain-invalid",
            ChannelError::ServerSignatureInvalid => "server-signature-invalid",
            ChannelError::ClientCertRequiredButAbsent => "client-cert-required-but-absent",
            ChannelError::ClientChainInvalid(_) => "client-chain-invalid",
            ChannelError::CertificateVerifyFailed => "certificate-verify-failed",
            ChannelError::FinishedMismatch => "finished-mismatch",
            ChannelError::UnexpectedMessage { .. } => "unexpected-message",
            ChannelError::Malformed(_) => "malformed",
            ChannelError::IntegrityCheckFailed => "integrity-check-failed",
            ChannelError::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for ChannelError {
    fn from(e: std::io::Error) -> Self {
        ChannelError::Io(e.to_string())
    }
}

// --- configuration ----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Credentials {
    pub chain: CertChain,
    pub key: SigningKey,
}

#[derive(Debug, Clone, Default)]
pub struct ClientChannelConfig {
    pub trusted_roots: Vec<Certificate>,
    pub credentials: Option<Credentials>,
}

#[derive(Debug, Clone)]
pub struct ServerChannelConfig {
    pub credentials: Credentials,
    pub require_client_cert: bool,
    /// Anchors for client chains; only consulted when certificates are requested.
    pub client_roots: Vec<Certificate>,
}

// --- messages ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    ClientHello = 1,
    ServerHello = 2,
    Certificate = 11,
    ServerKeyExchange = 12,
    CertificateRequest = 13,
    ServerHelloDone = 14,
    CertificateVerify = 15,
    ClientKeyExchange = 16,
    Finished = 20,
}

impl MessageKind {
    fn from_byte(b: u8) -> Result<Self, ChannelError> {
        Ok(match b {
            1 => MessageKind::ClientHello,
            2 => MessageKind::ServerHello,
            11 => MessageKind::Certificate,
            12 => MessageKind::ServerKeyExchange,
            13 => MessageKind::CertificateRequest,
            14 => MessageKind::ServerHelloDone,
            15 => MessageKind::CertificateVerify,
            16 => MessageKind::ClientKeyExchange,
            20 => MessageKind::Finished,
            other => return Err(ChannelError::Malformed(format!("unknown message type {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::ClientHello => "ClientHello",
            MessageKind::ServerHello => "ServerHello",
            MessageKind::Certificate => "Certificate",
            MessageKind::ServerKeyExchange => "ServerKeyExchange",
            MessageKind::CertificateRequest => "CertificateRequest",
            MessageKind::ServerHelloDone => "ServerHelloDone",
            MessageKind::CertificateVerify => "CertificateVerify",
            MessageKind::ClientKeyExchange => "ClientKeyExchange",
            MessageKind::Finished => "Finished",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Wire form: type (1 byte) || body length (u24) || body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandshakeMessage {
    pub kind: MessageKind,
    pub body: Vec<u8>,
}

impl HandshakeMessage {
    fn new(kind: MessageKind, body: Vec<u8>) -> Self {
        HandshakeMessage { kind, body }
    }

    pub fn encode(&self) -> Vec<u8> {
        let len = self.body.len() as u32;
        let mut out = Vec::with_capacity(4 + self.body.len());
        out.push(self.kind as u8);
        out.extend_from_slice(&len.to_be_bytes()[1..]);
        out.extend_from_slice(&self.body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ChannelError> {
        if bytes.len() < 4 {
            return Err(ChannelError::Malformed("short message header".into()));
        }
        let kind = MessageKind::from_byte(bytes[0])?;
        let len = u32::from_be_bytes([0, bytes[1], bytes[2], bytes[3]]) as usize;
        if bytes.len() != 4 + len {
            return Err(ChannelError::Malformed("length mismatch".into()));
        }
        Ok(HandshakeMessage {
            kind,
            body: bytes[4..].to_vec(),
        })
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, ChannelError> {
        let mut header = [0u8; 4];
        r.read_exact(&mut header)?;
        let len = u32::from_be_bytes([0, header[1], header[2], header[3]]) as usize;
        if len > MAX_MESSAGE {
            return Err(ChannelError::Malformed("message too large".into()));
        }
        let mut body = vec![0u8; len];
        r.read_exact(&mut body)?;
        Ok(HandshakeMessage {
            kind: MessageKind::from_byte(header[0])?,
            body,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sender {
    Client,
    Server,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub kind: MessageKind,
    pub sender: Sender,
    pub bytes: Vec<u8>,
    pub cleartext: bool,
}

impl TranscriptEntry {
    pub fn name(&self) -> String {
        match (self.kind, self.sender) {
            (MessageKind::Certificate, Sender::Client) => "Certificate(client)".into(),
            (MessageKind::Certificate, Sender::Server) => "Certificate(server)".into(),
            (MessageKind::Finished, Sender::Client) => "Finished(client)".into(),
            (MessageKind::Finished, Sender::Server) => "Finished(server)".into(),
            (k, _) => k.name().into(),
        }
    }
}

/// Append-only record of the messages exchanged, in protocol order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HandshakeTranscript {
    entries: Vec<TranscriptEntry>,
}

impl HandshakeTranscript {
    pub fn record(&mut self, sender: Sender, message: &HandshakeMessage) {
        self.entries.push(TranscriptEntry {
            kind: message.kind,
            sender,
            bytes: message.encode(),
            cleartext: message.kind != MessageKind::Finished,
        });
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn hash(&self) -> [u8; 32] {
        transcript_hash(self.entries.iter().map(|e| e.bytes.as_slice()))
    }
}

/// SHA-256 over the concatenated message bytes in order.
pub fn transcript_hash<'a>(messages: impl IntoIterator<Item = &'a [u8]>) -> [u8; 32] {
    let mut h = Sha256::new();
    for m in messages {
        h.update(m);
    }
    h.finalize().into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChannelMetrics {
    pub handshake_bytes: usize,
    pub cleartext_identity_exposed: bool,
    pub messages_exchanged: usize,
}

pub fn exposure_report(transcript: &HandshakeTranscript) -> ChannelMetrics {
    let entries = transcript.entries();
    ChannelMetrics {
        handshake_bytes: entries.iter().map(|e| e.bytes.len()).sum(),
        cleartext_identity_exposed: entries.iter().any(|e| {
            e.kind == MessageKind::Certificate && e.sender == Sender::Client && e.cleartext && e.bytes.len() > 4
        }),
        messages_exchanged: entries.len(),
    }
}

// --- key schedule -------------------------------------------------------------

struct KeySchedule {
    master: [u8; 32],
}

impl KeySchedule {
    fn derive(shared: &[u8], client_random: &[u8], server_random: &[u8]) -> Self {
        let mut salt = Vec::with_capacity(2 * RANDOM_LEN);
        salt.extend_from_slice(client_random);
        salt.extend_from_slice(server_random);
        let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
        let mut master = [0u8; 32];
        hk.expand(b"authbench master", &mut master)
            .expect("32 bytes is a valid length");
        KeySchedule { master }
    }

    fn expand(&self, label: &[u8]) -> [u8; 32] {
        let hk = Hkdf::<Sha256>::from_prk(&self.master).expect("PRK length is 32");
        let mut out = [0u8; 32];
        hk.expand(label, &mut out).expect("32 bytes is a valid length");
        out
    }

    fn finished(&self, label: &[u8], hash: &[u8; 32]) -> Vec<u8> {
        let mut msg = label.to_vec();
        msg.extend_from_slice(hash);
        hmac_sha256(&self.master, &msg)
    }
}

fn ephemeral<R: RngCore + CryptoRng>(rng: &mut R) -> (EphemeralSecret, Vec<u8>) {
    let secret = EphemeralSecret::random(rng);
    let public = secret.public_key().to_encoded_point(false).as_bytes().to_vec();
    (secret, public)
}

fn shared_secret(secret: &EphemeralSecret, peer: &[u8]) -> Result<Vec<u8>, ChannelError> {
    let peer =
        PublicKey::from_sec1_bytes(peer).map_err(|_| ChannelError::Malformed("bad ephemeral public key".into()))?;
    Ok(secret.diffie_hellman(&peer).raw_secret_bytes().to_vec())
}

fn random_bytes<R: RngCore>(rng: &mut R) -> [u8; RANDOM_LEN] {
    let mut out = [0u8; RANDOM_LEN];
    rng.fill_bytes(&mut out);
    out
}

fn expect(msg: &HandshakeMessage, kind: MessageKind) -> Result<(), ChannelError> {
    if msg.kind != kind {
        return Err(ChannelError::UnexpectedMessage {
            expected: kind.name(),
            got: msg.kind.name().into(),
        });
    }
    Ok(())
}

fn key_exchange_params(client_random: &[u8], server_random: &[u8], public: &[u8]) -> Vec<u8> {
    [client_random, server_random, public].concat()
}

// --- client state machine -----------------------------------------------------

enum ClientState {
    Start,
    AwaitServerHello,
    AwaitCertificate,
    AwaitKeyExchange,
    AwaitRequestOrDone,
    AwaitDone,
    AwaitFinished,
    Done,
}

pub struct ClientHandshake {
    config: ClientChannelConfig,
    now: u64,
    state: ClientState,
    transcript: HandshakeTranscript,
    client_random: [u8; RANDOM_LEN],
    server_random: Vec<u8>,
    server_leaf: Option<Certificate>,
    server_public: Vec<u8>,
    cert_requested: bool,
    schedule: Option<KeySchedule>,
}

impl ClientHandshake {
    pub fn new(config: ClientChannelConfig, now: u64) -> Self {
        ClientHandshake {
            config,
            now,
            state: ClientState::Start,
            transcript: HandshakeTranscript::default(),
            client_random: [0; RANDOM_LEN],
            server_random: Vec::new(),
            server_leaf: None,
            server_public: Vec::new(),
            cert_requested: false,
            schedule: None,
        }
    }

    pub fn transcript(&self) -> &HandshakeTranscript {
        &self.transcript
    }

    pub fn start<R: RngCore + CryptoRng>(&mut self, rng: &mut R) -> HandshakeMessage {
        self.client_random = random_bytes(rng);
        let hello = HandshakeMessage::new(MessageKind::ClientHello, self.client_random.to_vec());
        self.transcript.record(Sender::Client, &hello);
        self.state = ClientState::AwaitServerHello;
        hello
    }

    /// Feeds one server message; returns the client's reply flight (possibly empty).
    pub fn handle<R: RngCore + CryptoRng>(
        &mut self,
        msg: &HandshakeMessage,
        rng: &mut R,
    ) -> Result<Vec<HandshakeMessage>, ChannelError> {
        self.transcript.record(Sender::Server, msg);
        match self.state {
            ClientState::AwaitServerHello => {
                expect(msg, MessageKind::ServerHello)?;
                if msg.body.len() != RANDOM_LEN {
                    return Err(ChannelError::Malformed("server random".into()));
                }
                self.server_random = msg.body.clone();
                self.state = ClientState::AwaitCertificate;
                Ok(vec![])
            }
            ClientState::AwaitCertificate => {
                expect(msg, MessageKind::Certificate)?;
                let chain = CertChain::decode(&msg.body).map_err(|e| ChannelError::Malformed(e.to_string()))?;
                verify_chain_any(&self.config.trusted_roots, &chain, self.now)
                    .map_err(ChannelError::ServerChainInvalid)?;
                self.server_leaf = Some(chain.leaf().clone());
                self.state = ClientState::AwaitKeyExchange;
                Ok(vec![])
            }
            ClientState::AwaitKeyExchange => {
                expect(msg, MessageKind::ServerKeyExchange)?;
                let (public, signature) = split_field(&msg.body)?;
                let leaf = self.server_leaf.as_ref().expect("certificate precedes key exchange");
                let params = key_exchange_params(&self.client_random, &self.server_random, public);
                if !leaf.public_key.verify_bytes(&params, signature) {
                    return Err(ChannelError::ServerSignatureInvalid);
                }
                self.server_public = public.to_vec();
                self.state = ClientState::AwaitRequestOrDone;
                Ok(vec![])
            }
            ClientState::AwaitRequestOrDone if msg.kind == MessageKind::CertificateRequest => {
                self.cert_requested = true;
                self.state = ClientState::AwaitDone;
                Ok(vec![])
            }
            ClientState::AwaitRequestOrDone | ClientState::AwaitDone => {
                expect(msg, MessageKind::ServerHelloDone)?;
                self.client_flight(rng)
            }
            ClientState::AwaitFinished => {
                expect(msg, MessageKind::Finished)?;
                let entries = self.transcript.entries();
                let hash = transcript_hash(entries[..entries.len() - 1].iter().map(|e| e.bytes.as_slice()));
                let schedule = self.schedule.as_ref().expect("keys exist before finished");
                if schedule.finished(b"server finished", &hash) != msg.body {
                    return Err(ChannelError::FinishedMismatch);
                }
                self.state = ClientState::Done;
                Ok(vec![])
            }
            ClientState::Start | ClientState::Done => Err(ChannelError::UnexpectedMessage {
                expected: "nothing",
                got: msg.kind.name().into(),
            }),
        }
    }

    fn client_flight<R: RngCore + CryptoRng>(&mut self, rng: &mut R) -> Result<Vec<HandshakeMessage>, ChannelError> {
        let mut flight = Vec::new();
        let mut send = |this: &mut Self, m: HandshakeMessage| {
            this.transcript.record(Sender::Client, &m);
            flight.push(m);
        };
        let presented = if self.cert_requested {
            self.config.credentials.clone()
        } else {
            None
        };
        if self.cert_requested {
            let body = presented.as_ref().map(|c| c.chain.encode()).unwrap_or_default();
            send(self, HandshakeMessage::new(MessageKind::Certificate, body));
        }
        let (secret, public) = ephemeral(rng);
        send(self, HandshakeMessage::new(MessageKind::ClientKeyExchange, public));
        let shared = shared_secret(&secret, &self.server_public)?;
        self.schedule = Some(KeySchedule::derive(&shared, &self.client_random, &self.server_random));
        if let Some(creds) = &presented {
            let signature = creds.key.sign_bytes(&self.transcript.hash());
            send(self, HandshakeMessage::new(MessageKind::CertificateVerify, signature));
        }
        let verify = self
            .schedule
            .as_ref()
            .unwrap()
            .finished(b"client finished", &self.transcript.hash());
        send(self, HandshakeMessage::new(MessageKind::Finished, verify));
        self.state = ClientState::AwaitFinished;
        Ok(flight)
    }

    pub fn is_done(&self) -> bool {
        matches!(self.state, ClientState::Done)
    }

    pub fn finish(self) -> Result<(EstablishedChannel, HandshakeTranscript), ChannelError> {
        if !self.is_done() {
            return Err(ChannelError::UnexpectedMessage {
                expected: "Finished",
                got: "end of handshake".into(),
            });
        }
        let schedule = self.schedule.expect("done implies keys");
        let metrics = exposure_report(&self.transcript);
        let channel = EstablishedChannel::new(Sender::Client, schedule, None, metrics);
        Ok((channel, self.transcript))
    }
}

fn split_field(body: &[u8]) -> Result<(&[u8], &[u8]), ChannelError> {
    if body.len() < 2 {
        return Err(ChannelError::Malformed("short field".into()));
    }
    let len = u16::from_be_bytes([body[0], body[1]]) as usize;
    if body.len() < 2 + len {
        return Err(ChannelError::Malformed("short field".into()));
    }
    Ok((&body[2..2 + len], &body[2 + len..]))
}

// --- server state machine -----------------------------------------------------

enum ServerState {
    AwaitClientHello,
    AwaitCertificate,
    AwaitKeyExchange,
    AwaitVerify,
    AwaitFinished,
    Done,
}

pub struct ServerHandshake {
    config: ServerChannelConfig,
    now: u64,
    state: ServerState,
    transcript: HandshakeTranscript,
    client_random: Vec<u8>,
    server_random: [u8; RANDOM_LEN],
    secret: Option<EphemeralSecret>,
    client_leaf: Option<Certificate>,
    schedule: Option<KeySchedule>,
}

impl ServerHandshake {
    pub fn new(config: ServerChannelConfig, now: u64) -> Self {
        ServerHandshake {
            config,
            now,
            state: ServerState::AwaitClientHello,
            transcript: HandshakeTranscript::default(),
            client_random: Vec::new(),
            server_random: [0; RANDOM_LEN],
            secret: None,
            client_leaf: None,
            schedule: None,
        }
    }

    pub fn transcript(&self) -> &HandshakeTranscript {
        &self.transcript
    }

    pub fn handle<R: RngCore + CryptoRng>(
        &mut self,
        msg: &HandshakeMessage,
        rng: &mut R,
    ) -> Result<Vec<HandshakeMessage>, ChannelError> {
        self.transcript.record(Sender::Client, msg);
        match self.state {
            ServerState::AwaitClientHello => {
                expect(msg, MessageKind::ClientHello)?;
                if msg.body.len() != RANDOM_LEN {
                    return Err(ChannelError::Malformed("client random".into()));
                }
                self.client_random = msg.body.clone();
                Ok(self.server_flight(rng))
            }
            ServerState::AwaitCertificate => {
                expect(msg, MessageKind::Certificate)?;
                if msg.body.is_empty() {
                    return Err(ChannelError::ClientCertRequiredButAbsent);
                }
                let chain = CertChain::decode(&msg.body).map_err(|e| ChannelError::Malformed(e.to_string()))?;
                verify_chain_any(&self.config.client_roots, &chain, self.now)
                    .map_err(ChannelError::ClientChainInvalid)?;
                self.client_leaf = Some(chain.leaf().clone());
                self.state = ServerState::AwaitKeyExchange;
                Ok(vec![])
            }
            ServerState::AwaitKeyExchange => {
                expect(msg, MessageKind::ClientKeyExchange)?;
                let secret = self.secret.take().expect("server flight created the secret");
                let shared = shared_secret(&secret, &msg.body)?;
                self.schedule = Some(KeySchedule::derive(&shared, &self.client_random, &self.server_random));
                self.state = if self.client_leaf.is_some() {
                    ServerState::AwaitVerify
                } else {
                    ServerState::AwaitFinished
                };
                Ok(vec![])
            }
            ServerState::AwaitVerify => {
                expect(msg, MessageKind::CertificateVerify)?;
                let entries = self.transcript.entries();
                let hash = transcript_hash(entries[..entries.len() - 1].iter().map(|e| e.bytes.as_slice()));
                let leaf = self.client_leaf.as_ref().unwrap();
                if !leaf.public_key.verify_bytes(&hash, &msg.body) {
                    return Err(ChannelError::CertificateVerifyFailed);
                }
                self.state = ServerState::AwaitFinished;
                Ok(vec![])
            }
            ServerState::AwaitFinished => {
                expect(msg, MessageKind::Finished)?;
                let entries = self.transcript.entries();
                let hash = transcript_hash(entries[..entries.len() - 1].iter().map(|e| e.bytes.as_slice()));
                let schedule = self.schedule.as_ref().unwrap();
                if schedule.finished(b"client finished", &hash) != msg.body {
                    return Err(ChannelError::FinishedMismatch);
                }
                let reply = HandshakeMessage::new(
                    MessageKind::Finished,
                    schedule.finished(b"server finished", &self.transcript.hash()),
                );
                self.transcript.record(Sender::Server, &reply);
                self.state = ServerState::Done;
                Ok(vec![reply])
            }
            ServerState::Done => Err(ChannelError::UnexpectedMessage {
                expected: "nothing",
                got: msg.kind.name().into(),
            }),
        }
    }

    fn server_flight<R: RngCore + CryptoRng>(&mut self, rng: &mut R) -> Vec<HandshakeMessage> {
        self.server_random = random_bytes(rng);
        let (secret, public) = ephemeral(rng);
        self.secret = Some(secret);
        let params = key_exchange_params(&self.client_random, &self.server_random, &public);
        let signature = self.config.credentials.key.sign_bytes(&params);
        let mut kx = (public.len() as u16).to_be_bytes().to_vec();
        kx.extend_from_slice(&public);
        kx.extend_from_slice(&signature);

        let mut flight = vec![
            HandshakeMessage::new(MessageKind::ServerHello, self.server_random.to_vec()),
            HandshakeMessage::new(MessageKind::Certificate, self.config.credentials.chain.encode()),
            HandshakeMessage::new(MessageKind::ServerKeyExchange, kx),
        ];
        if self.config.require_client_cert {
            flight.push(HandshakeMessage::new(MessageKind::CertificateRequest, Vec::new()));
        }
        flight.push(HandshakeMessage::new(MessageKind::ServerHelloDone, Vec::new()));
        for m in &flight {
            self.transcript.record(Sender::Server, m);
        }
        self.state = if self.config.require_client_cert {
            ServerState::AwaitCertificate
        } else {
            ServerState::AwaitKeyExchange
        };
        flight
    }

    pub fn is_done(&self) -> bool {
        matches!(self.state, ServerState::Done)
    }

    pub fn finish(self) -> Result<(EstablishedChannel, HandshakeTranscript), ChannelError> {
        if !self.is_done() {
            return Err(ChannelError::UnexpectedMessage {
                expected: "Finished",
                got: "end of handshake".into(),
            });
        }
        let schedule = self.schedule.expect("done implies keys");
        let peer = self.client_leaf.map(|c| c.subject);
        let metrics = exposure_report(&self.transcript);
        Ok((
            EstablishedChannel::new(Sender::Server, schedule, peer, metrics),
            self.transcript,
        ))
    }
}

// --- in-process driver ----------------------------------------------------------

#[derive(Debug)]
pub struct Handshake {
    pub client: EstablishedChannel,
    pub server: EstablishedChannel,
    pub transcript: HandshakeTranscript,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandshakeFailure {
    pub reason: ChannelError,
    /// Messages placed on the wire before the failure.
    pub transcript: HandshakeTranscript,
}

impl fmt::Display for HandshakeFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "handshake failed: {}", self.reason)
    }
}

impl std::error::Error for HandshakeFailure {}

pub fn handshake<R: RngCore + CryptoRng>(
    client_cfg: &ClientChannelConfig,
    server_cfg: &ServerChannelConfig,
    now: u64,
    rng: &mut R,
) -> Result<Handshake, HandshakeFailure> {
    handshake_intercepted(client_cfg, server_cfg, now, rng, |_, _| {})
}

/// Runs both parties in process. `intercept` sees (and may modify) every
/// message in flight; the wire transcript records what was delivered.
pub fn handshake_intercepted<R, F>(
    client_cfg: &ClientChannelConfig,
    server_cfg: &ServerChannelConfig,
    now: u64,
    rng: &mut R,
    mut intercept: F,
) -> Result<Handshake, HandshakeFailure>
where
    R: RngCore + CryptoRng,
    F: FnMut(Sender, &mut HandshakeMessage),
{
    let mut wire = HandshakeTranscript::default();
    let mut client = ClientHandshake::new(client_cfg.clone(), now);
    let mut server = ServerHandshake::new(server_cfg.clone(), now);

    let mut to_server = vec![client.start(rng)];
    let fail = |reason, wire: &HandshakeTranscript| HandshakeFailure {
        reason,
        transcript: wire.clone(),
    };

    while !(client.is_done() && server.is_done()) {
        if to_server.is_empty() {
            return Err(fail(ChannelError::Malformed("handshake stalled".into()), &wire));
        }
        let mut to_client = Vec::new();
        for mut m in to_server.drain(..) {
            intercept(Sender::Client, &mut m);
            wire.record(Sender::Client, &m);
            to_client.extend(server.handle(&m, rng).map_err(|e| fail(e, &wire))?);
        }
        for mut m in to_client {
            intercept(Sender::Server, &mut m);
            wire.record(Sender::Server, &m);
            to_server.extend(client.handle(&m, rng).map_err(|e| fail(e, &wire))?);
        }
    }
    let (mut client_end, _) = client.finish().map_err(|e| fail(e, &wire))?;
    let (mut server_end, _) = server.finish().map_err(|e| fail(e, &wire))?;
    let metrics = exposure_report(&wire);
    client_end.metrics = metrics;
    server_end.metrics = metrics;
    Ok(Handshake {
        client: client_end,
        server: server_end,
        transcript: wire,
    })
}

// --- stream drivers -------------------------------------------------------------

pub fn client_handshake_over<S, R>(
    stream: &mut S,
    cfg: &ClientChannelConfig,
    now: u64,
    rng: &mut R,
) -> Result<(EstablishedChannel, HandshakeTranscript), ChannelError>
where
    S: Read + Write,
    R: RngCore + CryptoRng,
{
    let mut hs = ClientHandshake::new(cfg.clone(), now);
    stream.write_all(&hs.start(rng).encode())?;
    while !hs.is_done() {
        let msg = HandshakeMessage::read_from(stream)?;
        for reply in hs.handle(&msg, rng)? {
            stream.write_all(&reply.encode())?;
        }
        stream.flush()?;
    }
    hs.finish()
}

pub fn server_handshake_over<S, R>(
    stream: &mut S,
    cfg: &ServerChannelConfig,
    now: u64,
    rng: &mut R,
) -> Result<(EstablishedChannel, HandshakeTranscript), ChannelError>
where
    S: Read + Write,
    R: RngCore + CryptoRng,
{
    let mut hs = ServerHandshake::new(cfg.clone(), now);
    while !hs.is_done() {
        let msg = HandshakeMessage::read_from(stream)?;
        for reply in hs.handle(&msg, rng)? {
            stream.write_all(&reply.encode())?;
        }
        stream.flush()?;
    }
    hs.finish()
}

// --- record layer -------------------------------------------------------------

struct DirectionKeys {
    enc: [u8; 32],
    mac: [u8; 32],
}

/// Sealing half of an established channel.
pub struct RecordWriter {
    keys: DirectionKeys,
    seq: u64,
}

impl RecordWriter {
    pub fn seal(&mut self, payload: &[u8]) -> Vec<u8> {
        let ciphertext = apply_keystream(&self.keys.enc, self.seq, payload);
        let tag = record_tag(&self.keys.mac, self.seq, &ciphertext);
        self.seq += 1;
        let mut frame = Vec::with_capacity(4 + ciphertext.len() + TAG_LEN);
        frame.extend_from_slice(&(ciphertext.len() as u32).to_be_bytes());
        frame.extend_from_slice(&ciphertext);
        frame.extend_from_slice(&tag);
        frame
    }
}

/// Opening half of an established channel.
pub struct RecordReader {
    keys: DirectionKeys,
    seq: u64,
}

impl RecordReader {
    pub fn open(&mut self, frame: &[u8]) -> Result<Vec<u8>, ChannelError> {
        if frame.len() < 4 + TAG_LEN {
            return Err(ChannelError::IntegrityCheckFailed);
        }
        let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        if frame.len() != 4 + len + TAG_LEN {
            return Err(ChannelError::IntegrityCheckFailed);
        }
        let ciphertext = &frame[4..4 + len];
        let tag = &frame[4 + len..];
        let expected = record_tag(&self.keys.mac, self.seq, ciphertext);
        if !constant_time_eq(&expected, tag) {
            return Err(ChannelError::IntegrityCheckFailed);
        }
        let plain = apply_keystream(&self.keys.enc, self.seq, ciphertext);
        self.seq += 1;
        Ok(plain)
    }
}

/// One endpoint of an established channel.
///
/// Frame: u32 ciphertext length || ciphertext || HMAC-SHA-256 tag over
/// (sequence number || length || ciphertext).
pub struct EstablishedChannel {
    pub session_key: [u8; 32],
    pub peer_identity: Option<String>,
    pub metrics: ChannelMetrics,
    writer: RecordWriter,
    reader: RecordReader,
}

impl fmt::Debug for EstablishedChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EstablishedChannel")
            .field("peer_identity", &self.peer_identity)
            .field("metrics", &self.metrics)
            .finish_non_exhaustive()
    }
}

impl EstablishedChannel {
    fn new(role: Sender, schedule: KeySchedule, peer_identity: Option<String>, metrics: ChannelMetrics) -> Self {
        let c2s = DirectionKeys {
            enc: schedule.expand(b"c2s enc"),
            mac: schedule.expand(b"c2s mac"),
        };
        let s2c = DirectionKeys {
            enc: schedule.expand(b"s2c enc"),
            mac: schedule.expand(b"s2c mac"),
        };
        let (send_keys, recv_keys) = match role {
            Sender::Client => (c2s, s2c),
            Sender::Server => (s2c, c2s),
        };
        EstablishedChannel {
            session_key: schedule.master,
            peer_identity,
            metrics,
            writer: RecordWriter {
                keys: send_keys,
                seq: 0,
            },
            reader: RecordReader {
                keys: recv_keys,
                seq: 0,
            },
        }
    }

    pub fn send(&mut self, payload: &[u8]) -> Vec<u8> {
        self.writer.seal(payload)
    }

    pub fn recv(&mut self, frame: &[u8]) -> Result<Vec<u8>, ChannelError> {
        self.reader.open(frame)
    }

    pub fn split(self) -> (RecordWriter, RecordReader) {
        (self.writer, self.reader)
    }

    /// Reads one whole frame from a byte stream.
    pub fn read_frame<R: Read>(r: &mut R) -> Result<Vec<u8>, ChannelError> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let n = u32::from_be_bytes(len) as usize;
        if n > MAX_MESSAGE {
            return Err(ChannelError::IntegrityCheckFailed);
        }
        let mut frame = vec![0u8; 4 + n + TAG_LEN];
        frame[..4].copy_from_slice(&len);
        r.read_exact(&mut frame[4..])?;
        Ok(frame)
    }
}

fn apply_keystream(key: &[u8; 32], seq: u64, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len());
    for (block, chunk) in data.chunks(32).enumerate() {
        let pad = Sha256::new()
            .chain_update(key)
            .chain_update(seq.to_be_bytes())
            .chain_update((block as u64).to_be_bytes())
            .finalize();
        out.extend(chunk.iter().zip(pad.iter()).map(|(a, b)| a ^ b));
    }
    out
}

fn record_tag(key: &[u8; 32], seq: u64, ciphertext: &[u8]) -> Vec<u8> {
    let mut msg = Vec::with_capacity(12 + ciphertext.len());
    msg.extend_from_slice(&seq.to_be_bytes());
    msg.extend_from_slice(&(ciphertext.len() as u32).to_be_bytes());
    msg.extend_from_slice(ciphertext);
    hmac_sha256(key, &msg)
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}
