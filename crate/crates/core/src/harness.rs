//! Scenario runner and reports.
//!
//! A scenario is a broker configuration plus a fleet of device clients run
//! under a simulated clock. Runs are deterministic for a given seed: every
//! key, salt and handshake nonce comes from one seeded generator.
//!
//! Scenario file schema (TOML):
//!
//! ```toml
//! name = "jwt-6h"
//! seed = 7
//! duration = 21600                 # simulated seconds
//! start_time = 1700000000          # optional epoch seconds
//! server_chain_length = 1          # leaf plus intermediates, root excluded
//! chain_lengths = [1, 2, 4]        # optional, for sweep-chains
//!
//! [broker]
//! mode = "jwt"                     # username-password | mutual-tls | jwt | allow-anonymous
//! default_policy = "deny-all"      # or legacy-open
//! clock_skew_window = 600
//! max_lifetime = 3600
//! audience = "telemetry"
//! secure = true                    # false: plaintext listener
//!
//! [[fleet]]
//! name = "dev"                     # ids dev-1..dev-N when count > 1
//! count = 3
//! scheme = "jwt"                   # anonymous | username-password | mutual-tls | jwt
//! alg = "ES256"                    # JWT signing algorithm
//! keep_alive = 60
//! token_lifetime = 3600
//! refresh_margin = 300
//! skew = 0                         # device clock offset, seconds
//! registered = true                # known to the identity store
//! publish_interval = 30            # optional
//! publish_topic = "devices/{id}/telemetry"
//! subscriptions = []
//! publish_allow = ["devices/{id}/#"]
//! subscribe_allow = ["devices/+/telemetry"]
//! reconnect_backoff = 5
//! max_retries = 10                 # optional
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{
    broker_jwt_policy, AclPolicy, AuditEvent, AuthMode, AuthSchemeConfig, Broker, Decision, DefaultPolicy, IamError,
    IamStore, IdentityRecord, PasswordHash, Phase,
};
use crate::channel::{
    exposure_report, handshake, ChannelMetrics, ClientChannelConfig, Credentials, ServerChannelConfig,
};
use crate::client::{
    ClientConfig, ClientConfigError, ClockSource, DeviceClient, Direction, JwtSettings, PublishPlan, Scheme, TraceFrame,
};
use crate::jws::{Algorithm, JwsError, SigningKey, ValidationPolicy};
use crate::mqtt::decode_packet;
use crate::pki::{issue, self_sign, CertChain, Certificate, PkiError, Validity};
use crate::transport::{BrokerEndpoint, LocalBroker};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scenario syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("client {client}: {source}")]
    Client { client: String, source: ClientConfigError },
    #[error("identity store: {0}")]
    Iam(#[from] IamError),
    #[error("key generation: {0}")]
    Key(#[from] JwsError),
    #[error("certificates: {0}")]
    Pki(#[from] PkiError),
    #[error("handshake: {0}")]
    Handshake(String),
    #[error("comparison needs at least two reports, got {0}")]
    TooFewReports(usize),
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("simulation made no progress at t={0}")]
    Stalled(u64),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

// --- scenario schema ---------------------------------------------------------------

fn default_start() -> u64 {
    1_700_000_000
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_skew_window() -> u64 {
    600
}
fn default_lifetime() -> u64 {
    3600
}
fn default_margin() -> u64 {
    300
}
fn default_keep_alive() -> u16 {
    60
}
fn default_backoff() -> u64 {
    5
}
fn default_audience() -> String {
    "telemetry".into()
}
fn default_alg() -> Algorithm {
    Algorithm::Es256
}
fn default_publish_topic() -> String {
    "devices/{id}/telemetry".into()
}
fn default_publish_allow() -> Vec<String> {
    vec!["devices/{id}/#".into()]
}
fn default_subscribe_allow() -> Vec<String> {
    vec!["devices/+/telemetry".into()]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerSpec {
    pub mode: AuthMode,
    #[serde(default)]
    pub default_policy: DefaultPolicy,
    #[serde(default = "default_skew_window")]
    pub clock_skew_window: u64,
    #[serde(default = "default_lifetime")]
    pub max_lifetime: u64,
    #[serde(default = "default_audience")]
    pub audience: String,
    #[serde(default = "yes")]
    pub secure: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Anonymous,
    UsernamePassword,
    MutualTls,
    Jwt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSpec {
    pub name: String,
    #[serde(default = "one")]
    pub count: usize,
    pub scheme: SchemeKind,
    #[serde(default = "default_alg")]
    pub alg: Algorithm,
    #[serde(default = "default_keep_alive")]
    pub keep_alive: u16,
    #[serde(default = "default_lifetime")]
    pub token_lifetime: u64,
    #[serde(default = "default_margin")]
    pub refresh_margin: u64,
    #[serde(default)]
    pub skew: i64,
    #[serde(default = "yes")]
    pub registered: bool,
    pub publish_interval: Option<u64>,
    #[serde(default = "default_publish_topic")]
    pub publish_topic: String,
    #[serde(default)]
    pub subscriptions: Vec<String>,
    #[serde(default = "default_publish_allow")]
    pub publish_allow: Vec<String>,
    #[serde(default = "default_subscribe_allow")]
    pub subscribe_allow: Vec<String>,
    #[serde(default = "default_backoff")]
    pub reconnect_backoff: u64,
    pub max_retries: Option<u32>,
}

impl FleetSpec {
    pub fn new(name: impl Into<String>, scheme: SchemeKind) -> Self {
        FleetSpec {
            name: name.into(),
            count: 1,
            scheme,
            alg: default_alg(),
            keep_alive: default_keep_alive(),
            token_lifetime: default_lifetime(),
            refresh_margin: default_margin(),
            skew: 0,
            registered: true,
            publish_interval: None,
            publish_topic: default_publish_topic(),
            subscriptions: Vec::new(),
            publish_allow: default_publish_allow(),
            subscribe_allow: default_subscribe_allow(),
            reconnect_backoff: default_backoff(),
            max_retries: None,
        }
    }

    pub fn client_ids(&self) -> Vec<String> {
        if self.count == 1 {
            vec![self.name.clone()]
        } else {
            (1..=self.count).map(|i| format!("{}-{i}", self.name)).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration: u64,
    #[serde(default = "default_start")]
    pub start_time: u64,
    #[serde(default = "one")]
    pub server_chain_length: usize,
    #[serde(default)]
    pub chain_lengths: Vec<usize>,
    pub broker: BrokerSpec,
    #[serde(default)]
    pub fleet: Vec<FleetSpec>,
}

impl Scenario {
    pub fn new(name: impl Into<String>, mode: AuthMode, duration: u64) -> Self {
        Scenario {
            name: name.into(),
            seed: 0,
            duration,
            start_time: default_start(),
            server_chain_length: 1,
            chain_lengths: Vec::new(),
            broker: BrokerSpec {
                mode,
                default_policy: DefaultPolicy::DenyAll,
                clock_skew_window: default_skew_window(),
                max_lifetime: default_lifetime(),
                audience: default_audience(),
                secure: true,
            },
            fleet: Vec::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let invalid = |m: String| Err(HarnessError::Invalid(m));
        if self.duration == 0 {
            return invalid("duration must be positive".into());
        }
        if self.server_chain_length == 0 || self.chain_lengths.contains(&0) {
            return invalid("chain lengths start at 1".into());
        }
        if self.fleet.is_empty() {
            return invalid("fleet is empty".into());
        }
        if self.broker.default_policy == DefaultPolicy::LegacyOpen && self.broker.mode != AuthMode::AllowAnonymous {
            return invalid("legacy-open only applies to allow-anonymous".into());
        }
        if self.broker.mode == AuthMode::MutualTls && !self.broker.secure {
            return invalid("mutual-tls needs a secure listener".into());
        }
        let mut seen = BTreeSet::new();
        for f in &self.fleet {
            if f.count == 0 {
                return invalid(format!("fleet {:?} has count 0", f.name));
            }
            if f.scheme == SchemeKind::Jwt && f.refresh_margin >= f.token_lifetime {
                return invalid(format!(
                    "fleet {:?}: refresh_margin must be below token_lifetime",
                    f.name
                ));
            }
            if f.publish_interval == Some(0) {
                return invalid(format!("fleet {:?}: publish_interval must be positive", f.name));
            }
            for id in f.client_ids() {
                if id.is_empty() || id.contains(char::is_whitespace) {
                    return invalid(format!("client id {id:?} must be non-empty without spaces"));
                }
                if !seen.insert(id.clone()) {
                    return invalid(format!("duplicate client id {id:?}"));
                }
            }
        }
        Ok(())
    }

    pub fn scheme_config(&self) -> AuthSchemeConfig {
        AuthSchemeConfig {
            mode: self.broker.mode,
            jwt_policy: broker_jwt_policy(ValidationPolicy {
                clock_skew_window: self.broker.clock_skew_window,
                max_lifetime: self.broker.max_lifetime,
                required_aud: Some(self.broker.audience.clone()),
                max_iat_age: None,
            }),
            default_policy: self.broker.default_policy,
        }
    }
}

// --- certificates ---------------------------------------------------------------

/// A root plus a server chain of `length` certificates: the leaf and
/// `length - 1` intermediates, all ES256.
pub struct ServerPki {
    pub root: Certificate,
    pub root_key: SigningKey,
    pub chain: CertChain,
    pub leaf_key: SigningKey,
}

pub fn build_server_pki<R: RngCore + rand::CryptoRng>(
    length: usize,
    validity: Validity,
    rng: &mut R,
) -> Result<ServerPki, HarnessError> {
    if length == 0 {
        return Err(HarnessError::Invalid("chain length must be at least 1".into()));
    }
    let root_key = SigningKey::generate_es256(rng);
    let root = self_sign("authbench-root", &root_key, validity)?;
    let mut issuer = root.clone();
    let mut issuer_key = root_key.clone();
    let mut above_leaf = Vec::new();
    for i in 1..length {
        let key = SigningKey::generate_es256(rng);
        let cert = issue(
            &issuer,
            &issuer_key,
            &format!("authbench-intermediate-{i}"),
            &key.verification_key(),
            validity,
        )?;
        above_leaf.push(cert.clone());
        issuer = cert;
        issuer_key = key;
    }
    let leaf_key = SigningKey::generate_es256(rng);
    let leaf = issue(
        &issuer,
        &issuer_key,
        "broker.authbench",
        &leaf_key.verification_key(),
        validity,
    )?;
    let mut certs = vec![leaf];
    certs.extend(above_leaf.into_iter().rev());
    Ok(ServerPki {
        root,
        root_key,
        chain: CertChain::new(certs)?,
        leaf_key,
    })
}

// --- trace analysis -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketVariability {
    pub frame_count: usize,
    pub distinct_patterns: usize,
    /// Shannon entropy in bits of the byte at each offset, over the frames
    /// long enough to have one.
    pub entropy: Vec<f64>,
}

impl PacketVariability {
    pub fn total_entropy(&self) -> f64 {
        self.entropy.iter().sum()
    }

    pub fn max_entropy(&self) -> f64 {
        self.entropy.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VariabilityReport {
    /// Keyed by packet type name; undecodable frames under `opaque`.
    pub packets: BTreeMap<String, PacketVariability>,
}

pub const OPAQUE: &str = "opaque";

fn shannon(counts: &[usize; 256], total: usize) -> f64 {
    let n = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|c| **c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    // a single symbol gives -1 * log2(1) = -0.0
    h.max(0.0)
}

pub fn analyze_trace(frames: &[TraceFrame]) -> VariabilityReport {
    let mut groups: BTreeMap<String, Vec<&[u8]>> = BTreeMap::new();
    for f in frames {
        let key = match decode_packet(&f.bytes) {
            Ok((p, used)) if used == f.bytes.len() => p.packet_type().name().to_owned(),
            _ => OPAQUE.to_owned(),
        };
        groups.entry(key).or_default().push(&f.bytes);
    }
    let packets = groups
        .into_iter()
        .map(|(name, frames)| {
            let distinct = frames.iter().collect::<BTreeSet<_>>().len();
            let max_len = frames.iter().map(|f| f.len()).max().unwrap_or(0);
            let entropy = (0..max_len)
                .map(|i| {
                    let mut counts = [0usize; 256];
                    let mut total = 0;
                    for f in frames.iter().filter(|f| f.len() > i) {
                        counts[f[i] as usize] += 1;
                        total += 1;
                    }
                    shannon(&counts, total)
                })
                .collect();
            (
                name,
                PacketVariability {
                    frame_count: frames.len(),
                    distinct_patterns: distinct,
                    entropy,
                },
            )
        })
        .collect();
    VariabilityReport { packets }
}

/// Trace file: per frame a direction byte (0 to broker, 1 from broker), a
/// big-endian u32 length and the plaintext MQTT bytes.
pub fn encode_trace(frames: &[TraceFrame]) -> Vec<u8> {
    let mut out = Vec::new();
    for f in frames {
        out.push(f.direction.as_byte());
        out.extend_from_slice(&(f.bytes.len() as u32).to_be_bytes());
        out.extend_from_slice(&f.bytes);
    }
    out
}

pub fn decode_trace(mut bytes: &[u8]) -> Result<Vec<TraceFrame>, HarnessError> {
    let bad = |detail: &str| HarnessError::Malformed {
        what: "trace",
        detail: detail.to_owned(),
    };
    let mut frames = Vec::new();
    while !bytes.is_empty() {
        if bytes.len() < 5 {
            return Err(bad("truncated frame header"));
        }
        let direction = Direction::from_byte(bytes[0]).ok_or_else(|| bad("unknown direction byte"))?;
        let n = u32::from_be_bytes(bytes[1..5].try_into().unwrap()) as usize;
        if bytes.len() < 5 + n {
            return Err(bad("truncated frame body"));
        }
        frames.push(TraceFrame {
            direction,
            bytes: bytes[5..5 + n].to_vec(),
        });
        bytes = &bytes[5 + n..];
    }
    Ok(frames)
}

// --- running scenarios ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ByteStats {
    pub count: usize,
    pub min: usize,
    pub mean: f64,
    pub max: usize,
}

impl ByteStats {
    fn of(values: impl IntoIterator<Item = usize>) -> Option<Self> {
        let v: Vec<usize> = values.into_iter().collect();
        let (min, max) = (*v.iter().min()?, *v.iter().max()?);
        Some(ByteStats {
            count: v.len(),
            min,
            mean: v.iter().sum::<usize>() as f64 / v.len() as f64,
            max,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub scheme: String,
    pub seed: u64,
    pub duration: u64,
    pub clients: usize,
    /// Over completed handshakes; absent on plaintext listeners.
    pub handshake_bytes: Option<ByteStats>,
    pub cleartext_identity_exposed: bool,
    pub reconnect_count: usize,
    pub reconnects_per_client: BTreeMap<String, usize>,
    pub connect_attempts: u64,
    pub connect_successes: u64,
    pub success_rate: f64,
    /// Denials at CONNECT plus handshakes refused before a connection existed.
    pub auth_failures: BTreeMap<String, usize>,
    /// Phase of the first identity-store lookup, counted per accepted session.
    pub iam_consultation_phase: BTreeMap<String, usize>,
    /// Total per-offset entropy of the CONNECT frames, in bits.
    pub connect_frame_entropy: f64,
    pub variability: VariabilityReport,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// A report together with the raw records it was computed from.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub report: MetricsReport,
    pub audit_log: Vec<AuditEvent>,
    pub activity_log: Vec<String>,
    pub trace: Vec<TraceFrame>,
    pub handshakes: Vec<ChannelMetrics>,
}

impl ScenarioRun {
    pub fn write_to(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.report.to_json())?;
        let audit: String = self.audit_log.iter().map(|e| e.to_line() + "\n").collect();
        fs::write(dir.join("audit.log"), audit)?;
        let activity: String = self.activity_log.iter().map(|l| l.clone() + "\n").collect();
        fs::write(dir.join("activity.log"), activity)?;
        fs::write(dir.join("trace.bin"), encode_trace(&self.trace))?;
        Ok(())
    }
}

struct Provisioned {
    client: ClientConfig,
    skew: i64,
}

fn expand(filters: &[String], id: &str) -> Vec<String> {
    filters.iter().map(|f| f.replace("{id}", id)).collect()
}

fn provision(
    scenario: &Scenario,
    pki: &ServerPki,
    validity: Validity,
    rng: &mut ChaCha20Rng,
) -> Result<(IamStore, Vec<Provisioned>), HarnessError> {
    let mut iam = IamStore::new();
    let mut clients = Vec::new();
    for spec in &scenario.fleet {
        for id in spec.client_ids() {
            let mut record = IdentityRecord {
                acl: AclPolicy {
                    publish_allow: expand(&spec.publish_allow, &id),
                    subscribe_allow: expand(&spec.subscribe_allow, &id),
                },
                ..Default::default()
            };
            let scheme = match spec.scheme {
                SchemeKind::Anonymous => Scheme::Anonymous,
                SchemeKind::UsernamePassword => {
                    let mut raw = [0u8; 12];
                    rng.fill_bytes(&mut raw);
                    let password: String = raw.iter().map(|b| format!("{b:02x}")).collect();
                    record.password = Some(PasswordHash::new(password.as_bytes(), rng));
                    Scheme::UsernamePassword {
                        username: id.clone(),
                        password,
                    }
                }
                SchemeKind::MutualTls => {
                    let key = SigningKey::generate_es256(rng);
                    let cert = issue(&pki.root, &pki.root_key, &id, &key.verification_key(), validity)?;
                    record.cert_subjects.push(id.clone());
                    Scheme::MutualTls(Credentials {
                        chain: CertChain::new(vec![cert])?,
                        key,
                    })
                }
                SchemeKind::Jwt => {
                    let key = SigningKey::generate(spec.alg, rng)?.with_key_id("k1");
                    record.verification_keys.push_back(key.verification_key());
                    let mut settings = JwtSettings::new(key, scenario.broker.audience.clone());
                    settings.token_lifetime = spec.token_lifetime;
                    settings.refresh_margin = spec.refresh_margin;
                    Scheme::Jwt(settings)
                }
            };
            if spec.registered {
                iam.register_identity(&id, record)?;
            }
            let mut cfg = ClientConfig::new(id.clone(), scheme, vec![pki.root.clone()]);
            cfg.keep_alive = spec.keep_alive;
            cfg.secure = scenario.broker.secure;
            cfg.reconnect_backoff = spec.reconnect_backoff;
            cfg.max_retries = spec.max_retries;
            cfg.subscriptions = spec.subscriptions.iter().map(|f| f.replace("{id}", &id)).collect();
            cfg.publish = spec.publish_interval.map(|interval| PublishPlan {
                topic: spec.publish_topic.replace("{id}", &id),
                interval,
            });
            cfg.validate().map_err(|source| HarnessError::Client {
                client: id.clone(),
                source,
            })?;
            clients.push(Provisioned {
                client: cfg,
                skew: spec.skew,
            });
        }
    }
    Ok((iam, clients))
}

/// Runs the scenario to completion under the simulated clock.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioRun, HarnessError> {
    scenario.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(scenario.seed);
    let start = scenario.start_time;
    let end = start + scenario.duration;
    let validity = Validity::new(start.saturating_sub(86_400), end + 86_400)?;
    let pki = build_server_pki(scenario.server_chain_length, validity, &mut rng)?;
    let (iam, provisioned) = provision(scenario, &pki, validity, &mut rng)?;

    let server = scenario.broker.secure.then(|| ServerChannelConfig {
        credentials: Credentials {
            chain: pki.chain.clone(),
            key: pki.leaf_key.clone(),
        },
        require_client_cert: scenario.broker.mode == AuthMode::MutualTls,
        client_roots: vec![pki.root.clone()],
    });
    let mut ep = LocalBroker::new(Broker::new(scenario.scheme_config(), iam), server, rng.next_u64());
    let mut clients = provisioned
        .into_iter()
        .map(|p| DeviceClient::new(p.client, ClockSource::new(p.skew)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| HarnessError::Client {
            client: String::new(),
            source,
        })?;

    for c in &mut clients {
        c.start(&mut ep, start);
    }
    let mut last_t = start;
    let mut steps_at_t = 0u32;
    loop {
        let next_client = clients.iter().filter_map(|c| c.next_wakeup()).min();
        let t = match (next_client, ep.next_sweep_at()) {
            (Some(a), Some(b)) => a.min(b),
            (a, b) => match a.or(b) {
                Some(t) => t,
                None => break,
            },
        };
        if t > end {
            break;
        }
        if t == last_t {
            steps_at_t += 1;
            if steps_at_t > 10_000 {
                return Err(HarnessError::Stalled(t));
            }
        } else {
            last_t = t;
            steps_at_t = 0;
        }
        ep.advance(t);
        for c in &mut clients {
            if c.next_wakeup().is_some_and(|w| w <= t) {
                c.on_tick(&mut ep, t);
            }
        }
    }
    ep.advance(end);

    let audit_log = ep.broker().audit_log().to_vec();
    let mut activity_log = Vec::new();
    let mut trace = Vec::new();
    let mut handshakes = Vec::new();
    let mut reconnects_per_client = BTreeMap::new();
    let (mut attempts, mut successes) = (0u64, 0u64);
    for c in &clients {
        activity_log.extend(c.activity_log().iter().map(|e| e.to_string()));
        trace.extend_from_slice(c.trace());
        handshakes.extend_from_slice(c.handshakes());
        reconnects_per_client.insert(c.config().client_id.clone(), c.reconnect_count());
        attempts += c.connect_attempts() as u64;
        successes += c.connect_successes() as u64;
    }
    let variability = analyze_trace(&trace);
    let connect_frame_entropy = variability.packets.get("CONNECT").map_or(0.0, |v| v.total_entropy());

    let report = MetricsReport {
        scenario: scenario.name.clone(),
        scheme: scenario.broker.mode.as_str().to_owned(),
        seed: scenario.seed,
        duration: scenario.duration,
        clients: clients.len(),
        handshake_bytes: ByteStats::of(handshakes.iter().map(|h| h.handshake_bytes)),
        cleartext_identity_exposed: handshakes.iter().any(|h| h.cleartext_identity_exposed),
        reconnect_count: reconnects_per_client.values().sum(),
        reconnects_per_client,
        connect_attempts: attempts,
        connect_successes: successes,
        success_rate: if attempts == 0 {
            0.0
        } else {
            successes as f64 / attempts as f64
        },
        auth_failures: auth_failures(&audit_log),
        iam_consultation_phase: iam_phases(&audit_log),
        connect_frame_entropy,
        variability,
    };
    Ok(ScenarioRun {
        report,
        audit_log,
        activity_log,
        trace,
        handshakes,
    })
}

/// Denials that ended an authentication attempt, by reason.
pub fn auth_failures(audit: &[AuditEvent]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for e in audit {
        let counts = e.decision == Decision::Deny
            && (e.phase == Phase::MqttConnect || (e.phase == Phase::TlsHandshake && e.conn.is_none()));
        if counts {
            *out.entry(e.reason.clone().unwrap_or_else(|| "unspecified".into()))
                .or_insert(0) += 1;
        }
    }
    out
}

/// For each accepted session, the phase at which the identity store was
/// first consulted (`none` for anonymous sessions).
pub fn iam_phases(audit: &[AuditEvent]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    let accepted = audit
        .iter()
        .filter(|e| e.phase == Phase::MqttConnect && e.decision == Decision::Allow)
        .filter_map(|e| e.conn);
    for conn in accepted {
        let phase = audit
            .iter()
            .find(|e| e.conn == Some(conn) && e.iam_consulted)
            .map_or("none", |e| e.phase.as_str());
        *out.entry(phase.to_owned()).or_insert(0) += 1;
    }
    out
}

// --- comparison -------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Measured,
    Prerequisite,
}

impl RowKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RowKind::Measured => "measured",
            RowKind::Prerequisite => "prerequisite",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparisonRow {
    pub axis: String,
    pub kind: RowKind,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Comparison {
    pub table: ComparisonTable,
    pub warnings: Vec<String>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,kind");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.axis, r.kind.as_str());
            for v in &r.values {
                out.push(',');
                out.push_str(v);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, HarnessError> {
        let bad = |detail: String| HarnessError::Malformed {
            what: "comparison CSV",
            detail,
        };
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty".into()))?.split(',').collect();
        if header.len() < 2 || header[0] != "axis" || header[1] != "kind" {
            return Err(bad("header must start with axis,kind".into()));
        }
        let columns: Vec<String> = header[2..].iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != header.len() {
                return Err(bad(format!(
                    "row {line:?} has {} cells, expected {}",
                    cells.len(),
                    header.len()
                )));
            }
            let kind = match cells[1] {
                "measured" => RowKind::Measured,
                "prerequisite" => RowKind::Prerequisite,
                other => return Err(bad(format!("unknown row kind {other:?}"))),
            };
            rows.push(ComparisonRow {
                axis: cells[0].to_owned(),
                kind,
                values: cells[2..].iter().map(|s| s.to_string()).collect(),
            });
        }
        Ok(ComparisonTable { columns, rows })
    }

    pub fn to_text(&self) -> String {
        let mut widths = vec![
            self.rows.iter().map(|r| r.axis.len()).max().unwrap_or(0).max(4),
            "prerequisite".len(),
        ];
        for (i, c) in self.columns.iter().enumerate() {
            widths.push(
                self.rows
                    .iter()
                    .map(|r| r.values[i].len())
                    .max()
                    .unwrap_or(0)
                    .max(c.len()),
            );
        }
        let line = |cells: Vec<&str>| -> String {
            let mut s = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ");
            s.truncate(s.trim_end().len());
            s + "\n"
        };
        let mut out = line(
            ["axis", "kind"]
                .into_iter()
                .chain(self.columns.iter().map(String::as_str))
                .collect(),
        );
        for r in &self.rows {
            out += &line(
                [r.axis.as_str(), r.kind.as_str()]
                    .into_iter()
                    .chain(r.values.iter().map(String::as_str))
                    .collect(),
            );
        }
        out
    }
}

fn channel_prerequisite(scheme: &str) -> &'static str {
    match scheme {
        "username-password" | "jwt" => "required",
        "mutual-tls" => "intrinsic",
        _ => "optional",
    }
}

fn dominant_phase(phases: &BTreeMap<String, usize>) -> String {
    match phases.len() {
        0 => "none".into(),
        1 => phases.keys().next().unwrap().clone(),
        _ => "mixed".into(),
    }
}

/// One row per axis, one column per report.
pub fn compare_schemes(reports: &[MetricsReport]) -> Result<Comparison, HarnessError> {
    if reports.len() < 2 {
        return Err(HarnessError::TooFewReports(reports.len()));
    }
    let mut columns: Vec<String> = Vec::new();
    for r in reports {
        let mut name = r.scheme.clone();
        if columns.contains(&name) {
            name = format!("{}@{}", r.scheme, r.scenario);
        }
        if name.contains([',', '\n']) || columns.contains(&name) {
            return Err(HarnessError::Invalid(format!(
                "cannot name column for report {:?}",
                r.scenario
            )));
        }
        columns.push(name);
    }
    let row = |axis: &str, kind: RowKind, f: &dyn Fn(&MetricsReport) -> String| ComparisonRow {
        axis: axis.to_owned(),
        kind,
        values: reports.iter().map(f).collect(),
    };
    let rows = vec![
        row("secure-channel-for-credentials", RowKind::Prerequisite, &|r| {
            channel_prerequisite(&r.scheme).into()
        }),
        row("identity-exposure", RowKind::Measured, &|r| {
            r.cleartext_identity_exposed.to_string()
        }),
        row("handshake-bytes", RowKind::Measured, &|r| {
            r.handshake_bytes.map_or("-".into(), |b| format!("{:.1}", b.mean))
        }),
        row("reconnects", RowKind::Measured, &|r| r.reconnect_count.to_string()),
        row("iam-phase", RowKind::Measured, &|r| {
            dominant_phase(&r.iam_consultation_phase)
        }),
        row("connect-frame-entropy", RowKind::Measured, &|r| {
            format!("{:.3}", r.connect_frame_entropy)
        }),
        row("auth-failures", RowKind::Measured, &|r| {
            r.auth_failures.values().sum::<usize>().to_string()
        }),
    ];
    let mut warnings = Vec::new();
    let durations: BTreeSet<u64> = reports.iter().map(|r| r.duration).collect();
    if durations.len() > 1 {
        warnings.push(format!(
            "scenario durations differ ({}); counts are not directly comparable",
            durations.iter().map(u64::to_string).collect::<Vec<_>>().join(", ")
        ));
    }
    Ok(Comparison {
        table: ComparisonTable { columns, rows },
        warnings,
    })
}

// --- chain cost ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainCost {
    pub length: usize,
    pub chain_bytes: usize,
    pub handshake_bytes: usize,
}

/// Server-authenticated handshake size for each server chain length.
pub fn chain_cost_sweep(lengths: &[usize], seed: u64) -> Result<Vec<ChainCost>, HarnessError> {
    let now = default_start();
    let validity = Validity::new(now - 86_400, now + 86_400)?;
    lengths
        .iter()
        .map(|&length| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let pki = build_server_pki(length, validity, &mut rng)?;
            let client = ClientChannelConfig {
                trusted_roots: vec![pki.root.clone()],
                credentials: None,
            };
            let chain_bytes = pki.chain.encode().len();
            let server = ServerChannelConfig {
                credentials: Credentials {
                    chain: pki.chain,
                    key: pki.leaf_key,
                },
                require_client_cert: false,
                client_roots: vec![],
            };
            let hs = handshake(&client, &server, now, &mut rng).map_err(|e| HarnessError::Handshake(e.to_string()))?;
            Ok(ChainCost {
                length,
                chain_bytes,
                handshake_bytes: exposure_report(&hs.transcript).handshake_bytes,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mqtt::{encode_packet, Packet};

    fn frame(p: &Packet) -> TraceFrame {
        TraceFrame {
            direction: Direction::ToBroker,
            bytes: encode_packet(p).unwrap(),
        }
    }

    #[test]
    fn pingreq_trace_has_zero_entropy() {
        let frames: Vec<_> = (0..100).map(|_| frame(&Packet::Pingreq)).collect();
        let r = analyze_trace(&frames);
        let v = &r.packets["PINGREQ"];
        assert_eq!(v.frame_count, 100);
        assert_eq!(v.distinct_patterns, 1);
        assert!(v.entropy.iter().all(|h| *h == 0.0));
    }

    #[test]
    fn entropy_of_two_equiprobable_bytes_is_one_bit() {
        let frames = vec![
            TraceFrame {
                direction: Direction::ToBroker,
                bytes: vec![0xFF, 0],
            },
            TraceFrame {
                direction: Direction::ToBroker,
                bytes: vec![0xFF, 1],
            },
            TraceFrame {
                direction: Direction::ToBroker,
                bytes: vec![0xFF],
            },
        ];
        let v = &analyze_trace(&frames).packets[OPAQUE];
        assert_eq!(v.entropy, vec![0.0, 1.0]);
        assert_eq!(v.distinct_patterns, 3);
    }

    #[test]
    fn trace_file_round_trip() {
        let frames = vec![
            frame(&Packet::Pingreq),
            TraceFrame {
                direction: Direction::FromBroker,
                bytes: vec![0xD0, 0],
            },
        ];
        let bytes = encode_trace(&frames);
        assert_eq!(&bytes[..7], &[0, 0, 0, 0, 2, 0xC0, 0]);
        assert_eq!(decode_trace(&bytes).unwrap(), frames);
        assert!(decode_trace(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_trace(&[7, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn scenario_validation() {
        let mut s = Scenario::new("x", AuthMode::Jwt, 10);
        assert!(s.validate().is_err());
        s.fleet.push(FleetSpec::new("a", SchemeKind::Jwt));
        s.validate().unwrap();
        s.fleet.push(FleetSpec::new("a", SchemeKind::Jwt));
        assert!(s.validate().is_err());
        s.fleet.pop();
        s.fleet[0].refresh_margin = 3600;
        assert!(s.validate().is_err());
        assert!(Scenario::parse("name = \"x\"\nduration = 5\n[broker]\nmode = \"jwt\"\nfoo = 1").is_err());
    }

    #[test]
    fn parses_documented_schema() {
        let text = r#"
name = "demo"
seed = 3
duration = 120
[broker]
mode = "mutual-tls"
[[fleet]]
name = "dev"
count = 2
scheme = "mutual-tls"
"#;
        let s = Scenario::parse(text).unwrap();
        assert_eq!(s.fleet[0].client_ids(), vec!["dev-1", "dev-2"]);
        assert_eq!(s.start_time, 1_700_000_000);
        assert_eq!(s.server_chain_length, 1);
    }

    #[test]
    fn compare_needs_two_reports() {
        let mut s = Scenario::new("solo", AuthMode::UsernamePassword, 60);
        s.fleet.push(FleetSpec::new("u", SchemeKind::UsernamePassword));
        let r = run_scenario(&s).unwrap().report;
        assert!(matches!(
            compare_schemes(std::slice::from_ref(&r)),
            Err(HarnessError::TooFewReports(1))
        ));
        let mut longer = r.clone();
        longer.duration = 120;
        longer.scenario = "other".into();
        let c = compare_schemes(&[r, longer]).unwrap();
        assert_eq!(c.table.columns, vec!["username-password", "username-password@other"]);
        assert_eq!(c.warnings.len(), 1);
    }

    #[test]
    fn chain_sweep_grows() {
        let series = chain_cost_sweep(&[1, 2, 3], 4).unwrap();
        assert!(series.windows(2).all(|w| w[1].handshake_bytes > w[0].handshake_bytes));
        assert!(chain_cost_sweep(&[0], 4).is_err());
    }
}
