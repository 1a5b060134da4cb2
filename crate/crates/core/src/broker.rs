//! MQTT broker core: pluggable client authentication, an identity store with
//! per-identity key rings and topic ACLs, session and keep-alive handling,
//! and an audit log recording when the identity store was consulted.
//!
//! The broker is transport-agnostic. A transport opens a connection (telling
//! the broker what the secure channel learned about the peer), feeds decoded
//! packets in arrival order and carries out the returned [`Action`]s.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::jws::{parse_compact, validate_claims, verify_signature, ValidationPolicy, VerificationKey};
use crate::mqtt::{connack, filter_covers, topic_matches, validate_filter, Connect, Packet, SUBACK_FAILURE};

pub mod config;

pub type ConnId = u64;

/// Verification keys an identity may hold at once.
pub const MAX_KEYS_PER_IDENTITY: usize = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IamError {
    #[error("identity {0:?} already registered")]
    Duplicate(String),
    #[error("unknown identity {0:?}")]
    UnknownIdentity(String),
    #[error("at most {MAX_KEYS_PER_IDENTITY} verification keys per identity")]
    TooManyKeys,
    #[error("verification keys need a key id")]
    MissingKeyId,
    #[error("invalid ACL filter {0:?}")]
    InvalidFilter(String),
}

// --- identity store -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PasswordHash {
    salt: [u8; 16],
    digest: [u8; 32],
}

impl PasswordHash {
    pub fn new<R: RngCore + CryptoRng>(password: &[u8], rng: &mut R) -> Self {
        let mut salt = [0u8; 16];
        rng.fill_bytes(&mut salt);
        PasswordHash {
            salt,
            digest: Self::digest(&salt, password),
        }
    }

    fn digest(salt: &[u8], password: &[u8]) -> [u8; 32] {
        Sha256::new()
            .chain_update(salt)
            .chain_update(password)
            .finalize()
            .into()
    }

    pub fn matches(&self, password: &[u8]) -> bool {
        let candidate = Self::digest(&self.salt, password);
        candidate
            .iter()
            .zip(self.digest.iter())
            .fold(0u8, |acc, (a, b)| acc | (a ^ b))
            == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AclPolicy {
    #[serde(default)]
    pub publish_allow: Vec<String>,
    #[serde(default)]
    pub subscribe_allow: Vec<String>,
}

impl AclPolicy {
    fn validate(&self) -> Result<(), IamError> {
        for f in self.publish_allow.iter().chain(&self.subscribe_allow) {
            validate_filter(f).map_err(|_| IamError::InvalidFilter(f.clone()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct IdentityRecord {
    pub password: Option<PasswordHash>,
    pub cert_subjects: Vec<String>,
    /// Oldest first.
    pub verification_keys: VecDeque<VerificationKey>,
    pub acl: AclPolicy,
}

#[derive(Debug, Clone, Default)]
pub struct IamStore {
    identities: BTreeMap<String, IdentityRecord>,
}

impl IamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_identity(&mut self, name: &str, record: IdentityRecord) -> Result<(), IamError> {
        if self.identities.contains_key(name) {
            return Err(IamError::Duplicate(name.to_owned()));
        }
        if record.verification_keys.len() > MAX_KEYS_PER_IDENTITY {
            return Err(IamError::TooManyKeys);
        }
        if record.verification_keys.iter().any(|k| k.key_id.is_none()) {
            return Err(IamError::MissingKeyId);
        }
        record.acl.validate()?;
        self.identities.insert(name.to_owned(), record);
        Ok(())
    }

    /// Adds `key` to the identity's ring, evicting (and returning) the oldest
    /// key when the ring is full.
    pub fn rotate_keys(&mut self, name: &str, key: VerificationKey) -> Result<Option<VerificationKey>, IamError> {
        if key.key_id.is_none() {
            return Err(IamError::MissingKeyId);
        }
        let record = self
            .identities
            .get_mut(name)
            .ok_or_else(|| IamError::UnknownIdentity(name.to_owned()))?;
        let evicted = if record.verification_keys.len() >= MAX_KEYS_PER_IDENTITY {
            record.verification_keys.pop_front()
        } else {
            None
        };
        record.verification_keys.push_back(key);
        Ok(evicted)
    }

    pub fn get(&self, name: &str) -> Option<&IdentityRecord> {
        self.identities.get(name)
    }

    pub fn identity_for_subject(&self, subject: &str) -> Option<&str> {
        self.identities
            .iter()
            .find(|(_, r)| r.cert_subjects.iter().any(|s| s == subject))
            .map(|(name, _)| name.as_str())
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

// --- scheme configuration -------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuthMode {
    UsernamePassword,
    MutualTls,
    Jwt,
    AllowAnonymous,
}

impl AuthMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AuthMode::UsernamePassword => "username-password",
            AuthMode::MutualTls => "mutual-tls",
            AuthMode::Jwt => "jwt",
            AuthMode::AllowAnonymous => "allow-anonymous",
        }
    }
}

impl fmt::Display for AuthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefaultPolicy {
    #[default]
    DenyAll,
    /// Unauthenticated sessions may publish and subscribe anywhere.
    LegacyOpen,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthSchemeConfig {
    pub mode: AuthMode,
    pub jwt_policy: ValidationPolicy,
    pub default_policy: DefaultPolicy,
}

impl AuthSchemeConfig {
    pub fn new(mode: AuthMode) -> Self {
        AuthSchemeConfig {
            mode,
            jwt_policy: broker_jwt_policy(ValidationPolicy::default()),
            default_policy: DefaultPolicy::DenyAll,
        }
    }
}

/// Brokers refuse tokens whose `iat` is off by more than the skew window in
/// either direction.
pub fn broker_jwt_policy(mut policy: ValidationPolicy) -> ValidationPolicy {
    policy.max_iat_age = Some(policy.clock_skew_window);
    policy
}

// --- audit log ------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    TlsHandshake,
    MqttConnect,
    Publish,
    Subscribe,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::TlsHandshake => "tls-handshake",
            Phase::MqttConnect => "mqtt-connect",
            Phase::Publish => "publish",
            Phase::Subscribe => "subscribe",
        }
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "tls-handshake" => Phase::TlsHandshake,
            "mqtt-connect" => Phase::MqttConnect,
            "publish" => Phase::Publish,
            "subscribe" => Phase::Subscribe,
            other => return Err(format!("unknown phase {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEvent {
    pub timestamp: u64,
    /// `None` for handshakes that failed before a connection existed.
    pub conn: Option<ConnId>,
    pub phase: Phase,
    pub iam_consulted: bool,
    pub decision: Decision,
    pub identity: Option<String>,
    pub client_id: Option<String>,
    pub reason: Option<String>,
}

impl AuditEvent {
    /// `ts=.. conn=.. phase=.. iam=.. decision=.. identity=.. client=.. reason=..`,
    /// `-` standing for an absent value. Values never contain spaces.
    pub fn to_line(&self) -> String {
        fn opt(v: &Option<String>) -> &str {
            v.as_deref().unwrap_or("-")
        }
        format!(
            "ts={} conn={} phase={} iam={} decision={} identity={} client={} reason={}",
            self.timestamp,
            self.conn.map_or("-".to_string(), |c| c.to_string()),
            self.phase.as_str(),
            self.iam_consulted,
            match self.decision {
                Decision::Allow => "allow",
                Decision::Deny => "deny",
            },
            opt(&self.identity),
            opt(&self.client_id),
            opt(&self.reason),
        )
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let fields: HashMap<&str, &str> = line
            .split_whitespace()
            .map(|kv| kv.split_once('=').ok_or_else(|| format!("bad field {kv:?}")))
            .collect::<Result<_, _>>()?;
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| format!("missing {k}"));
        let opt = |k: &str| -> Result<Option<String>, String> {
            Ok(match get(k)? {
                "-" => None,
                v => Some(v.to_owned()),
            })
        };
        Ok(AuditEvent {
            timestamp: get("ts")?.parse().map_err(|e| format!("ts: {e}"))?,
            conn: match get("conn")? {
                "-" => None,
                c => Some(c.parse().map_err(|e| format!("conn: {e}"))?),
            },
            phase: get("phase")?.parse()?,
            iam_consulted: get("iam")?.parse().map_err(|e| format!("iam: {e}"))?,
            decision: match get("decision")? {
                "allow" => Decision::Allow,
                "deny" => Decision::Deny,
                other => return Err(format!("bad decision {other:?}")),
            },
            identity: opt("identity")?,
            client_id: opt("client")?,
            reason: opt("reason")?,
        })
    }
}

// --- authentication ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuthOutcome {
    Granted(String),
    Denied { code: u8, reason: String },
}

impl AuthOutcome {
    fn denied(code: u8, reason: impl Into<String>) -> Self {
        AuthOutcome::Denied {
            code,
            reason: reason.into(),
        }
    }
}

pub fn authenticate_username_password(connect: &Connect, iam: &IamStore) -> AuthOutcome {
    let bad = connack::BAD_USERNAME_OR_PASSWORD;
    let Some(username) = &connect.username else {
        return AuthOutcome::denied(bad, "missing-username");
    };
    let Some(password) = &connect.password else {
        return AuthOutcome::denied(bad, "missing-password");
    };
    match iam.get(username).and_then(|r| r.password.as_ref()) {
        Some(hash) if hash.matches(password) => AuthOutcome::Granted(username.clone()),
        Some(_) => AuthOutcome::denied(bad, "bad-password"),
        None => AuthOutcome::denied(bad, "unknown-identity"),
    }
}

/// Maps the client certificate subject learned during the handshake to an
/// identity.
pub fn authenticate_mtls(peer_identity: Option<&str>, iam: &IamStore) -> AuthOutcome {
    let Some(subject) = peer_identity else {
        return AuthOutcome::denied(connack::NOT_AUTHORIZED, "no-client-certificate");
    };
    match iam.identity_for_subject(subject) {
        Some(name) => AuthOutcome::Granted(name.to_owned()),
        None => AuthOutcome::denied(connack::NOT_AUTHORIZED, "unregistered-subject"),
    }
}

/// The client id names the identity; `kid`, when present, picks the key.
pub fn authenticate_jwt(connect: &Connect, iam: &IamStore, now: i64, policy: &ValidationPolicy) -> AuthOutcome {
    let bad = connack::BAD_USERNAME_OR_PASSWORD;
    let Some(password) = &connect.password else {
        return AuthOutcome::denied(bad, "missing-token");
    };
    let Ok(text) = std::str::from_utf8(password) else {
        return AuthOutcome::denied(bad, "malformed-token");
    };
    let Ok(token) = parse_compact(text) else {
        return AuthOutcome::denied(bad, "malformed-token");
    };
    let Some(record) = iam.get(&connect.client_id) else {
        return AuthOutcome::denied(bad, "unknown-identity");
    };
    let verified = record
        .verification_keys
        .iter()
        .filter(|k| match &token.header.kid {
            Some(kid) => k.key_id.as_deref() == Some(kid.as_str()),
            None => true,
        })
        .any(|k| verify_signature(&token, k));
    if !verified {
        return AuthOutcome::denied(bad, "bad-signature");
    }
    match validate_claims(&token.claims, now, policy) {
        Ok(()) => AuthOutcome::Granted(connect.client_id.clone()),
        Err(reason) => AuthOutcome::denied(connack::NOT_AUTHORIZED, reason.as_str()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AclAction {
    Publish,
    Subscribe,
}

/// Publishing needs a `publish_allow` filter matching the topic; subscribing
/// needs a `subscribe_allow` filter covering the requested filter.
pub fn authorize(
    identity: Option<&str>,
    action: AclAction,
    topic_or_filter: &str,
    iam: &IamStore,
    default_policy: DefaultPolicy,
) -> bool {
    let Some(name) = identity else {
        return default_policy == DefaultPolicy::LegacyOpen;
    };
    let Some(record) = iam.get(name) else {
        return false;
    };
    match action {
        AclAction::Publish => record
            .acl
            .publish_allow
            .iter()
            .any(|f| topic_matches(f, topic_or_filter)),
        AclAction::Subscribe => record
            .acl
            .subscribe_allow
            .iter()
            .any(|f| filter_covers(f, topic_or_filter)),
    }
}

fn may_receive(identity: Option<&str>, topic: &str, iam: &IamStore, default_policy: DefaultPolicy) -> bool {
    match identity {
        None => default_policy == DefaultPolicy::LegacyOpen,
        Some(name) => iam
            .get(name)
            .is_some_and(|r| r.acl.subscribe_allow.iter().any(|f| topic_matches(f, topic))),
    }
}

// --- sessions -------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub client_id: String,
    pub identity: Option<String>,
    pub authenticated: bool,
    pub keep_alive: u16,
    pub last_activity: u64,
    pub subscriptions: Vec<String>,
    pub channel_peer_identity: Option<String>,
}

impl Session {
    /// `last_activity + 1.5 × keep_alive`, in milliseconds; `None` when
    /// keep-alive is disabled.
    pub fn deadline_ms(&self) -> Option<u64> {
        (self.keep_alive > 0).then(|| self.last_activity * 1000 + 1500 * self.keep_alive as u64)
    }

    pub fn is_expired(&self, now: u64) -> bool {
        self.deadline_ms().is_some_and(|d| d < now * 1000)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseReason {
    ProtocolViolation,
    AuthenticationFailed,
    TakenOver,
    KeepAliveExpired,
    ClientDisconnect,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Send(ConnId, Packet),
    Close(ConnId, CloseReason),
}

/// What the transport learned while setting up the connection.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConnectionInfo {
    pub secure: bool,
    pub peer_identity: Option<String>,
}

#[derive(Debug)]
struct Connection {
    info: ConnectionInfo,
    /// Result of the identity lookup made during the handshake (mutual TLS).
    handshake_auth: Option<AuthOutcome>,
    session: Option<Session>,
}

pub struct Broker {
    config: AuthSchemeConfig,
    iam: Arc<RwLock<IamStore>>,
    connections: BTreeMap<ConnId, Connection>,
    by_client_id: HashMap<String, ConnId>,
    audit: Vec<AuditEvent>,
    next_conn: ConnId,
}

impl Broker {
    pub fn new(config: AuthSchemeConfig, iam: IamStore) -> Self {
        Self::with_shared_iam(config, Arc::new(RwLock::new(iam)))
    }

    pub fn with_shared_iam(config: AuthSchemeConfig, iam: Arc<RwLock<IamStore>>) -> Self {
        Broker {
            config,
            iam,
            connections: BTreeMap::new(),
            by_client_id: HashMap::new(),
            audit: Vec::new(),
            next_conn: 1,
        }
    }

    pub fn config(&self) -> &AuthSchemeConfig {
        &self.config
    }

    pub fn iam(&self) -> RwLockReadGuard<'_, IamStore> {
        self.iam.read().expect("IAM lock poisoned")
    }

    pub fn iam_mut(&self) -> RwLockWriteGuard<'_, IamStore> {
        self.iam.write().expect("IAM lock poisoned")
    }

    pub fn shared_iam(&self) -> Arc<RwLock<IamStore>> {
        Arc::clone(&self.iam)
    }

    pub fn audit_log(&self) -> &[AuditEvent] {
        &self.audit
    }

    pub fn session(&self, conn: ConnId) -> Option<&Session> {
        self.connections.get(&conn).and_then(|c| c.session.as_ref())
    }

    pub fn sessions(&self) -> impl Iterator<Item = (ConnId, &Session)> {
        self.connections
            .iter()
            .filter_map(|(id, c)| c.session.as_ref().map(|s| (*id, s)))
    }

    pub fn is_open(&self, conn: ConnId) -> bool {
        self.connections.contains_key(&conn)
    }

    /// Earliest keep-alive deadline among live sessions, in milliseconds.
    pub fn next_deadline_ms(&self) -> Option<u64> {
        self.sessions().filter_map(|(_, s)| s.deadline_ms()).min()
    }

    /// Registers a transport connection. For secure connections this is the
    /// end of the handshake; under mutual TLS the identity store is consulted
    /// here, before any MQTT byte is read.
    pub fn open_connection(&mut self, info: ConnectionInfo, now: u64) -> ConnId {
        let conn = self.next_conn;
        self.next_conn += 1;
        let mut handshake_auth = None;
        if info.secure {
            let event = if self.config.mode == AuthMode::MutualTls {
                let outcome = authenticate_mtls(info.peer_identity.as_deref(), &self.iam());
                let event = self.auth_event(now, Some(conn), Phase::TlsHandshake, true, &outcome, None);
                handshake_auth = Some(outcome);
                event
            } else {
                AuditEvent {
                    timestamp: now,
                    conn: Some(conn),
                    phase: Phase::TlsHandshake,
                    iam_consulted: false,
                    decision: Decision::Allow,
                    identity: None,
                    client_id: None,
                    reason: Some("channel-established".into()),
                }
            };
            self.audit.push(event);
        }
        self.connections.insert(
            conn,
            Connection {
                info,
                handshake_auth,
                session: None,
            },
        );
        conn
    }

    /// Records a secure-channel handshake that failed before a connection existed.
    pub fn record_handshake_failure(&mut self, reason: &str, now: u64) {
        self.audit.push(AuditEvent {
            timestamp: now,
            conn: None,
            phase: Phase::TlsHandshake,
            iam_consulted: false,
            decision: Decision::Deny,
            identity: None,
            client_id: None,
            reason: Some(reason.to_owned()),
        });
    }

    /// Transport went away.
    pub fn close_connection(&mut self, conn: ConnId) {
        if let Some(c) = self.connections.remove(&conn) {
            if let Some(s) = c.session {
                if self.by_client_id.get(&s.client_id) == Some(&conn) {
                    self.by_client_id.remove(&s.client_id);
                }
            }
        }
    }

    fn auth_event(
        &self,
        now: u64,
        conn: Option<ConnId>,
        phase: Phase,
        iam_consulted: bool,
        outcome: &AuthOutcome,
        client_id: Option<&str>,
    ) -> AuditEvent {
        let (decision, identity, reason) = match outcome {
            AuthOutcome::Granted(id) => (Decision::Allow, Some(id.clone()), None),
            AuthOutcome::Denied { reason, .. } => (Decision::Deny, None, Some(reason.clone())),
        };
        AuditEvent {
            timestamp: now,
            conn,
            phase,
            iam_consulted,
            decision,
            identity,
            client_id: client_id.map(str::to_owned),
            reason,
        }
    }

    fn violation(&mut self, conn: ConnId) -> Vec<Action> {
        self.close_connection(conn);
        vec![Action::Close(conn, CloseReason::ProtocolViolation)]
    }

    /// Processes one packet from `conn`. Packets of one connection must be
    /// fed in arrival order.
    pub fn handle_packet(&mut self, conn: ConnId, packet: Packet, now: u64) -> Vec<Action> {
        let Some(connection) = self.connections.get(&conn) else {
            return vec![];
        };
        let has_session = connection.session.is_some();
        match packet {
            Packet::Connect(c) if !has_session => self.handle_connect(conn, c, now),
            _ if !has_session => self.violation(conn),
            Packet::Publish { topic, payload } => self.handle_publish(conn, topic, payload, now),
            Packet::Subscribe { packet_id, filters } => self.handle_subscribe(conn, packet_id, filters, now),
            Packet::Pingreq => {
                self.touch(conn, now);
                vec![Action::Send(conn, Packet::Pingresp)]
            }
            Packet::Disconnect => {
                self.close_connection(conn);
                vec![Action::Close(conn, CloseReason::ClientDisconnect)]
            }
            Packet::Connect(_) | Packet::Connack { .. } | Packet::Suback { .. } | Packet::Pingresp => {
                self.violation(conn)
            }
        }
    }

    fn touch(&mut self, conn: ConnId, now: u64) {
        if let Some(s) = self.connections.get_mut(&conn).and_then(|c| c.session.as_mut()) {
            s.last_activity = now;
        }
    }

    fn handle_connect(&mut self, conn: ConnId, connect: Connect, now: u64) -> Vec<Action> {
        let connection = &self.connections[&conn];
        let peer = connection.info.peer_identity.clone();
        let (outcome, iam_consulted) = match self.config.mode {
            AuthMode::UsernamePassword => (authenticate_username_password(&connect, &self.iam()), true),
            AuthMode::Jwt => (
                authenticate_jwt(&connect, &self.iam(), now as i64, &self.config.jwt_policy),
                true,
            ),
            AuthMode::MutualTls => match &connection.handshake_auth {
                Some(outcome) => (outcome.clone(), false),
                // plaintext connection: there is no certificate to look at
                None => (authenticate_mtls(None, &self.iam()), false),
            },
            AuthMode::AllowAnonymous if connect.username.is_some() => {
                (authenticate_username_password(&connect, &self.iam()), true)
            }
            AuthMode::AllowAnonymous => (AuthOutcome::Granted(String::new()), false),
        };
        let mut event = self.auth_event(
            now,
            Some(conn),
            Phase::MqttConnect,
            iam_consulted,
            &outcome,
            Some(&connect.client_id),
        );
        let identity = match outcome {
            AuthOutcome::Denied { code, .. } => {
                self.audit.push(event);
                self.close_connection(conn);
                return vec![
                    Action::Send(
                        conn,
                        Packet::Connack {
                            session_present: false,
                            return_code: code,
                        },
                    ),
                    Action::Close(conn, CloseReason::AuthenticationFailed),
                ];
            }
            AuthOutcome::Granted(id) if id.is_empty() => {
                event.identity = None;
                event.reason = Some("anonymous".into());
                None
            }
            AuthOutcome::Granted(id) => Some(id),
        };
        self.audit.push(event);

        let mut actions = Vec::new();
        if let Some(old) = self.by_client_id.insert(connect.client_id.clone(), conn) {
            if old != conn {
                self.connections.remove(&old);
                actions.push(Action::Close(old, CloseReason::TakenOver));
            }
        }
        let session = Session {
            client_id: connect.client_id,
            authenticated: identity.is_some(),
            identity,
            keep_alive: connect.keep_alive,
            last_activity: now,
            subscriptions: Vec::new(),
            channel_peer_identity: peer,
        };
        self.connections.get_mut(&conn).unwrap().session = Some(session);
        actions.push(Action::Send(
            conn,
            Packet::Connack {
                session_present: false,
                return_code: connack::ACCEPTED,
            },
        ));
        actions
    }

    fn handle_publish(&mut self, conn: ConnId, topic: String, payload: Vec<u8>, now: u64) -> Vec<Action> {
        self.touch(conn, now);
        let session = self.session(conn).expect("checked by caller").clone();
        let iam = self.iam.read().expect("IAM lock poisoned");
        let policy = self.config.default_policy;
        let allowed = authorize(session.identity.as_deref(), AclAction::Publish, &topic, &iam, policy);
        let mut actions = Vec::new();
        if allowed {
            for (id, c) in &self.connections {
                let Some(receiver) = &c.session else { continue };
                let subscribed = receiver.subscriptions.iter().any(|f| topic_matches(f, &topic));
                if subscribed && may_receive(receiver.identity.as_deref(), &topic, &iam, policy) {
                    actions.push(Action::Send(
                        *id,
                        Packet::Publish {
                            topic: topic.clone(),
                            payload: payload.clone(),
                        },
                    ));
                }
            }
        }
        drop(iam);
        self.audit.push(AuditEvent {
            timestamp: now,
            conn: Some(conn),
            phase: Phase::Publish,
            iam_consulted: session.identity.is_some(),
            decision: if allowed { Decision::Allow } else { Decision::Deny },
            identity: session.identity.clone(),
            client_id: Some(session.client_id.clone()),
            reason: Some(topic),
        });
        actions
    }

    fn handle_subscribe(&mut self, conn: ConnId, packet_id: u16, filters: Vec<(String, u8)>, now: u64) -> Vec<Action> {
        self.touch(conn, now);
        let session = self.session(conn).expect("checked by caller").clone();
        let mut return_codes = Vec::with_capacity(filters.len());
        let mut granted = Vec::new();
        {
            let iam = self.iam.read().expect("IAM lock poisoned");
            for (filter, _qos) in &filters {
                let ok = authorize(
                    session.identity.as_deref(),
                    AclAction::Subscribe,
                    filter,
                    &iam,
                    self.config.default_policy,
                );
                self.audit.push(AuditEvent {
                    timestamp: now,
                    conn: Some(conn),
                    phase: Phase::Subscribe,
                    iam_consulted: session.identity.is_some(),
                    decision: if ok { Decision::Allow } else { Decision::Deny },
                    identity: session.identity.clone(),
                    client_id: Some(session.client_id.clone()),
                    reason: Some(filter.clone()),
                });
                return_codes.push(if ok { 0x00 } else { SUBACK_FAILURE });
                if ok {
                    granted.push(filter.clone());
                }
            }
        }
        let s = self.connections.get_mut(&conn).unwrap().session.as_mut().unwrap();
        for f in granted {
            if !s.subscriptions.contains(&f) {
                s.subscriptions.push(f);
            }
        }
        vec![Action::Send(
            conn,
            Packet::Suback {
                packet_id,
                return_codes,
            },
        )]
    }

    /// Closes every session whose keep-alive deadline has passed.
    pub fn keep_alive_sweep(&mut self, now: u64) -> Vec<ConnId> {
        let expired: Vec<ConnId> = self
            .sessions()
            .filter(|(_, s)| s.is_expired(now))
            .map(|(id, _)| id)
            .collect();
        for id in &expired {
            self.close_connection(*id);
        }
        expired
    }
}
