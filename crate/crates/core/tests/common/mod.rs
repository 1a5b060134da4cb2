//! Fixtures, strategies and trial runners shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use authbench::broker::{
    AclPolicy, Action, AuthMode, AuthSchemeConfig, Broker, ConnId, ConnectionInfo, IamStore, IdentityRecord,
    PasswordHash,
};
use authbench::jws::{compact_serialize, sign, Algorithm, ClaimValue, ClaimsSet, JoseHeader, SigningKey};
use authbench::mqtt::{Connect, Packet};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub const T0: u64 = 1_700_000_000;

// --- reference primitives ------------------------------------------------------------

pub fn ref_hmac_sha256(key: &[u8], msg: &[u8]) -> [u8; 32] {
    let mut k = [0u8; 64];
    if key.len() > 64 {
        k[..32].copy_from_slice(&Sha256::digest(key));
    } else {
        k[..key.len()].copy_from_slice(key);
    }
    let ipad: Vec<u8> = k.iter().map(|b| b ^ 0x36).collect();
    let opad: Vec<u8> = k.iter().map(|b| b ^ 0x5c).collect();
    let inner = Sha256::new().chain_update(&ipad).chain_update(msg).finalize();
    Sha256::new().chain_update(&opad).chain_update(inner).finalize().into()
}

pub fn ref_base64url(data: &[u8]) -> String {
    const ALPHABET: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_";
    let mut out = String::new();
    for chunk in data.chunks(3) {
        let b = [chunk[0], *chunk.get(1).unwrap_or(&0), *chunk.get(2).unwrap_or(&0)];
        let n = (b[0] as u32) << 16 | (b[1] as u32) << 8 | b[2] as u32;
        let chars = chunk.len() + 1;
        for i in 0..chars {
            out.push(ALPHABET[(n >> (18 - 6 * i) & 63) as usize] as char);
        }
    }
    out
}

// --- packets -------------------------------------------------------------------------

fn arb_text() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-zA-Z0-9_-]{1,12}",
        "\\PC{1,8}".prop_filter("no NUL", |s| !s.contains('\0')),
    ]
}

pub fn arb_topic() -> impl Strategy<Value = String> {
    proptest::collection::vec("[a-z0-9 ]{0,5}|\\PC{1,3}", 1..5)
        .prop_map(|segs| segs.join("/"))
        .prop_filter("valid topic", |t| !t.is_empty() && !t.contains(['+', '#', '\0']))
}

pub fn arb_filter() -> impl Strategy<Value = String> {
    (
        proptest::collection::vec(prop_oneof!["[a-z]{0,4}", Just("+".to_owned())], 1..5),
        any::<bool>(),
    )
        .prop_map(|(mut segs, hash)| {
            if hash {
                segs.push("#".into());
            }
            segs.join("/")
        })
        .prop_filter("non-empty", |f| !f.is_empty())
}

pub fn arb_packet() -> impl Strategy<Value = Packet> {
    let connect = (
        arb_text(),
        proptest::option::of(arb_text()),
        proptest::option::of(proptest::collection::vec(any::<u8>(), 0..400)),
        any::<u16>(),
        any::<bool>(),
    )
        .prop_map(|(client_id, username, password, keep_alive, clean_session)| {
            Packet::Connect(Connect {
                client_id,
                username,
                password,
                keep_alive,
                clean_session,
            })
        });
    prop_oneof![
        connect,
        (any::<bool>(), 0u8..=5).prop_map(|(session_present, return_code)| Packet::Connack {
            session_present,
            return_code
        }),
        (arb_topic(), proptest::collection::vec(any::<u8>(), 0..300))
            .prop_map(|(topic, payload)| Packet::Publish { topic, payload }),
        (any::<u16>(), proptest::collection::vec((arb_filter(), 0u8..=2), 1..5))
            .prop_map(|(packet_id, filters)| Packet::Subscribe { packet_id, filters }),
        (
            any::<u16>(),
            proptest::collection::vec(prop_oneof![Just(0u8), Just(0x80u8)], 0..6)
        )
            .prop_map(|(packet_id, return_codes)| Packet::Suback {
                packet_id,
                return_codes
            }),
        Just(Packet::Pingreq),
        Just(Packet::Pingresp),
        Just(Packet::Disconnect),
    ]
}

// --- claims ------------------------------------------------------------------------

pub fn random_claims(rng: &mut impl Rng) -> ClaimsSet {
    let iat = rng.gen_range(0..4_000_000_000i64);
    let mut c = ClaimsSet::new(iat, iat + rng.gen_range(1..100_000)).unwrap();
    let text = |rng: &mut dyn rand::RngCore| -> String {
        let pool = [
            'a',
            'Z',
            '7',
            ' ',
            '"',
            '\\',
            '/',
            'é',
            '雪',
            '\n',
            '\u{1F600}',
            '\u{7}',
        ];
        (0..rng.gen_range(0..12))
            .map(|_| pool[rng.gen_range(0..pool.len())])
            .collect()
    };
    if rng.gen_bool(0.7) {
        c.iss = Some(text(rng));
    }
    if rng.gen_bool(0.7) {
        c.sub = Some(text(rng));
    }
    if rng.gen_bool(0.5) {
        c.aud = Some(text(rng));
    }
    for i in 0..rng.gen_range(0..3) {
        let v = match rng.gen_range(0..3) {
            0 => ClaimValue::Text(text(rng)),
            1 => ClaimValue::Integer(rng.gen()),
            _ => ClaimValue::Bool(rng.gen()),
        };
        c.custom.insert(format!("x{i}{}", text(rng)), v);
    }
    c
}

pub fn token(key: &SigningKey, kid: Option<&str>, iat: i64, lifetime: i64, aud: &str) -> String {
    let mut claims = ClaimsSet::new(iat, iat + lifetime).unwrap();
    claims.aud = Some(aud.into());
    let mut header = JoseHeader::new(key.alg());
    header.kid = kid.map(Into::into);
    compact_serialize(&sign(header, claims, key).unwrap())
}

pub fn connect_packet(client_id: &str, username: Option<&str>, password: Option<&[u8]>, keep_alive: u16) -> Packet {
    Packet::Connect(Connect {
        client_id: client_id.into(),
        username: username.map(Into::into),
        password: password.map(<[u8]>::to_vec),
        keep_alive,
        clean_session: true,
    })
}

pub fn accepted(actions: &[Action]) -> bool {
    actions
        .iter()
        .any(|a| matches!(a, Action::Send(_, Packet::Connack { return_code: 0, .. })))
}

// --- topic oracle --------------------------------------------------------------------

pub const SYMBOLS: [&str; 3] = ["a", "b", "c"];

/// All topics of 1..=depth segments over the alphabet.
pub fn all_topics(depth: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut level: Vec<Vec<&str>> = vec![vec![]];
    for _ in 0..depth {
        level = level
            .iter()
            .flat_map(|prefix| SYMBOLS.iter().map(move |s| [prefix.clone(), vec![*s]].concat()))
            .collect();
        out.extend(level.iter().map(|segs| segs.join("/")));
    }
    out
}

/// Filters of at most four segments: symbols and `+`, optionally closed by `#`.
pub fn all_filters() -> Vec<String> {
    let mut bodies: Vec<Vec<&str>> = vec![vec![]];
    let mut all = Vec::new();
    for _ in 0..4 {
        bodies = bodies
            .iter()
            .flat_map(|prefix| {
                SYMBOLS
                    .iter()
                    .chain(["+"].iter())
                    .map(move |s| [prefix.clone(), vec![*s]].concat())
            })
            .collect();
        all.extend(bodies.clone());
    }
    let mut out: Vec<String> = all.iter().map(|segs| segs.join("/")).collect();
    out.push("#".into());
    out.extend(
        all.iter()
            .filter(|s| s.len() < 4)
            .map(|segs| format!("{}/#", segs.join("/"))),
    );
    out
}

/// Every concrete topic (up to `depth` segments) the filter stands for,
/// produced by substituting wildcards rather than by matching.
pub fn expand(filter: &str, depth: usize) -> BTreeSet<String> {
    let mut partial: Vec<Vec<String>> = vec![vec![]];
    let mut out = BTreeSet::new();
    for seg in filter.split('/') {
        match seg {
            "+" => {
                partial = partial
                    .iter()
                    .flat_map(|p| SYMBOLS.iter().map(move |s| [p.clone(), vec![s.to_string()]].concat()))
                    .collect();
            }
            "#" => {
                for p in &partial {
                    if !p.is_empty() {
                        out.insert(p.join("/"));
                    }
                    for suffix in all_topics(depth.saturating_sub(p.len())) {
                        out.insert(if p.is_empty() {
                            suffix
                        } else {
                            format!("{}/{suffix}", p.join("/"))
                        });
                    }
                }
                return out;
            }
            s => {
                for p in &mut partial {
                    p.push(s.to_string());
                }
            }
        }
    }
    out.extend(partial.into_iter().filter(|p| p.len() <= depth).map(|p| p.join("/")));
    out
}

/// (filter, topic) pairs where `topic_matches` differs from expansion.
pub fn matcher_disagreements() -> Vec<(String, String)> {
    let topics = all_topics(4);
    let mut out = Vec::new();
    for f in all_filters() {
        let expected = expand(&f, 4);
        for t in &topics {
            if authbench::mqtt::topic_matches(&f, t) != expected.contains(t) {
                out.push((f.clone(), t.clone()));
            }
        }
    }
    out
}

// --- broker safety -------------------------------------------------------------------

pub const IDENTITIES: [&str; 2] = ["dev-a", "dev-b"];

fn open_acl() -> AclPolicy {
    AclPolicy {
        publish_allow: vec!["#".into()],
        subscribe_allow: vec!["#".into()],
    }
}

pub struct SafetyFixture {
    pub broker: Broker,
    pub hs_keys: BTreeMap<&'static str, SigningKey>,
}

/// Broker in one of the deny-all modes with two registered identities whose
/// ACLs allow everything, so only authentication stands between a session
/// and delivery.
pub fn safety_fixture(mode: AuthMode, rng: &mut ChaCha20Rng) -> SafetyFixture {
    let mut iam = IamStore::new();
    let mut hs_keys = BTreeMap::new();
    for name in IDENTITIES {
        let key = SigningKey::hs256(format!("secret-{name}").into_bytes()).with_key_id("k1");
        let mut record = IdentityRecord {
            password: Some(PasswordHash::new(format!("pw-{name}").as_bytes(), rng)),
            cert_subjects: vec![format!("CN={name}")],
            acl: open_acl(),
            ..Default::default()
        };
        record.verification_keys.push_back(key.verification_key());
        iam.register_identity(name, record).unwrap();
        hs_keys.insert(name, key);
    }
    SafetyFixture {
        broker: Broker::new(AuthSchemeConfig::new(mode), iam),
        hs_keys,
    }
}

fn random_connect(f: &SafetyFixture, mode: AuthMode, now: u64, rng: &mut ChaCha20Rng) -> Packet {
    let who = ["dev-a", "dev-b", "mallory"][rng.gen_range(0..3)];
    let good = rng.gen_bool(0.5);
    let keep_alive = [0u16, 1, 5, 30][rng.gen_range(0..4)];
    match mode {
        AuthMode::Jwt => {
            let tok = match f.hs_keys.get(who) {
                Some(k) if good => token(k, Some("k1"), now as i64, 3600, "unused"),
                Some(_) => token(
                    &SigningKey::hs256(b"forged".to_vec()),
                    Some("k1"),
                    now as i64,
                    3600,
                    "x",
                ),
                None => "not.a.token".into(),
            };
            let password = (rng.gen_bool(0.9)).then_some(tok);
            connect_packet(who, None, password.as_deref().map(str::as_bytes), keep_alive)
        }
        _ => {
            let pw = if good { format!("pw-{who}") } else { "guess".into() };
            let user = rng.gen_bool(0.9).then_some(who);
            connect_packet(
                &format!("{who}-{}", rng.gen_range(0..3)),
                user,
                Some(pw.as_bytes()),
                keep_alive,
            )
        }
    }
}

/// One randomized interleaving of connection set-up, CONNECTs with good and
/// bad credentials, subscriptions, publishes, pings, disconnects, drops and
/// keep-alive sweeps. Fails if a PUBLISH is delivered from or to a
/// connection without an authenticated session. Returns deliveries made.
pub fn interleaving_trial(mode: AuthMode, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut f = safety_fixture(mode, &mut rng);
    let mut now = T0;
    let mut conns: Vec<ConnId> = Vec::new();
    let mut delivered = 0;
    for step in 0..200 {
        now += rng.gen_range(0..4);
        let op = rng.gen_range(0..100);
        if conns.is_empty() || op < 12 {
            let peer = match rng.gen_range(0..4) {
                0 => None,
                1 => Some("CN=mallory".to_owned()),
                i => Some(format!("CN={}", IDENTITIES[i - 2])),
            };
            let secure = mode == AuthMode::MutualTls || rng.gen_bool(0.5);
            let info = ConnectionInfo {
                secure,
                peer_identity: peer.filter(|_| secure),
            };
            conns.push(f.broker.open_connection(info, now));
            continue;
        }
        if op < 16 {
            for c in f.broker.keep_alive_sweep(now) {
                if f.broker.is_open(c) {
                    return Err(format!("step {step}: swept connection {c} still open"));
                }
            }
            continue;
        }
        let conn = conns[rng.gen_range(0..conns.len())];
        if op < 19 {
            f.broker.close_connection(conn);
            continue;
        }
        let packet = match op {
            19..=40 => random_connect(&f, mode, now, &mut rng),
            41..=55 => Packet::Subscribe {
                packet_id: rng.gen(),
                filters: vec![("#".into(), 0)],
            },
            56..=85 => Packet::Publish {
                topic: "devices/x/telemetry".into(),
                payload: vec![step as u8],
            },
            86..=92 => Packet::Pingreq,
            93..=95 => Packet::Disconnect,
            _ => Packet::Connack {
                session_present: false,
                return_code: 0,
            },
        };
        let sender_ok = f
            .broker
            .session(conn)
            .is_some_and(|s| s.authenticated && s.identity.is_some());
        let is_publish = matches!(packet, Packet::Publish { .. });
        let actions = f.broker.handle_packet(conn, packet, now);
        for a in &actions {
            if let Action::Send(to, Packet::Publish { .. }) = a {
                if !is_publish || !sender_ok {
                    return Err(format!(
                        "step {step}: publish delivered from unauthenticated connection {conn}"
                    ));
                }
                let receiver_ok = f
                    .broker
                    .session(*to)
                    .is_some_and(|s| s.authenticated && s.identity.is_some());
                if !receiver_ok {
                    return Err(format!(
                        "step {step}: publish delivered to unauthenticated connection {to}"
                    ));
                }
                delivered += 1;
            }
        }
    }
    Ok(delivered)
}

/// Sessions with random keep-alives and activity times; a sweep at a random
/// instant must remove exactly those idle for more than one and a half
/// keep-alive periods, computed here in whole half-seconds.
pub fn sweep_trial(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut iam = IamStore::new();
    iam.register_identity(
        "dev",
        IdentityRecord {
            password: Some(PasswordHash::new(b"pw", &mut rng)),
            ..Default::default()
        },
    )
    .unwrap();
    let mut broker = Broker::new(AuthSchemeConfig::new(AuthMode::UsernamePassword), iam);
    let mut expected = BTreeSet::new();
    let mut all = BTreeSet::new();
    let now = T0 + 1000;
    for i in 0..rng.gen_range(1..30) {
        let keep_alive: u16 = [0, 1, 2, 3, 10, 60, 600][rng.gen_range(0..7)];
        let connected_at = T0 + rng.gen_range(0..1000);
        let conn = broker.open_connection(ConnectionInfo::default(), connected_at);
        let actions = broker.handle_packet(
            conn,
            connect_packet(&format!("c{i}"), Some("dev"), Some(b"pw"), keep_alive),
            connected_at,
        );
        if !accepted(&actions) {
            return Err(format!("connect {i} refused"));
        }
        let mut last = connected_at;
        if rng.gen_bool(0.5) {
            last = rng.gen_range(connected_at..=now);
            broker.handle_packet(conn, Packet::Pingreq, last);
        }
        all.insert(conn);
        if keep_alive > 0 && 2 * (now - last) > 3 * keep_alive as u64 {
            expected.insert(conn);
        }
    }
    let swept: BTreeSet<ConnId> = broker.keep_alive_sweep(now).into_iter().collect();
    if swept != expected {
        return Err(format!("swept {swept:?}, expected {expected:?}"));
    }
    for c in &all {
        if broker.is_open(*c) == expected.contains(c) {
            return Err(format!("connection {c} open state wrong after sweep"));
        }
    }
    Ok(())
}

// --- key rotation ----------------------------------------------------------------------

/// Rotates `trials` fresh keys into one identity's ring and after each
/// rotation presents a token from every key minted so far. Keys still in the
/// ring must be accepted, evicted ones refused, and the ring never exceed 3.
pub fn rotation_run(trials: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut iam = IamStore::new();
    iam.register_identity("dev", IdentityRecord::default()).unwrap();
    let mut broker = Broker::new(AuthSchemeConfig::new(AuthMode::Jwt), iam);
    let mut minted: Vec<(String, SigningKey)> = Vec::new();
    let mut ring: Vec<String> = Vec::new();
    let mut now = T0;
    for trial in 0..trials {
        now += 60;
        let alg = if trial % 10 == 0 {
            Algorithm::Es256
        } else {
            Algorithm::Hs256
        };
        let kid = format!("k{trial}");
        let key = SigningKey::generate(alg, &mut rng).unwrap().with_key_id(kid.clone());
        let evicted = broker
            .iam_mut()
            .rotate_keys("dev", key.verification_key())
            .map_err(|e| e.to_string())?;
        ring.push(kid.clone());
        if ring.len() > 3 {
            let oldest = ring.remove(0);
            if evicted.and_then(|k| k.key_id) != Some(oldest.clone()) {
                return Err(format!("trial {trial}: expected {oldest} evicted"));
            }
        } else if evicted.is_some() {
            return Err(format!("trial {trial}: eviction before the ring was full"));
        }
        minted.push((kid, key));
        let held = broker.iam().get("dev").map_or(0, |r| r.verification_keys.len());
        if held > 3 {
            return Err(format!("trial {trial}: ring holds {held} keys"));
        }
        for (kid, key) in &minted {
            let want = ring.contains(kid);
            for header_kid in [Some(kid.as_str()), None] {
                let tok = token(key, header_kid, now as i64, 600, "x");
                let conn = broker.open_connection(ConnectionInfo::default(), now);
                let got =
                    accepted(&broker.handle_packet(conn, connect_packet("dev", None, Some(tok.as_bytes()), 0), now));
                broker.close_connection(conn);
                if got != want {
                    return Err(format!(
                        "trial {trial}: key {kid} (kid in header: {}) accepted={got}",
                        header_kid.is_some()
                    ));
                }
            }
        }
    }
    Ok(())
}
