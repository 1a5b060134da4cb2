//! End-to-end runs of the harness, the shipped scenario files and the TCP
//! listener.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use authbench::broker::config::ListenerConfig;
use authbench::broker::{AuditEvent, AuthMode, Broker, Decision, DefaultPolicy, Phase};
use authbench::client::config::ClientFile;
use authbench::client::{ActivityEvent, ActivityKind, DeviceClient, Direction};
use authbench::harness::{
    compare_schemes, decode_trace, encode_trace, run_scenario, ComparisonTable, FleetSpec, MetricsReport, Scenario,
    SchemeKind,
};
use authbench::mqtt::{decode_packet, Packet};
use authbench::net::{wall_clock, Server};
use authbench::provision::provision_demo;
use authbench::transport::TcpEndpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn scenario_file(name: &str) -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    Scenario::parse(&fs::read_to_string(path).unwrap()).unwrap()
}

fn shipped_scenarios() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut files: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
}

#[test]
fn shipped_scenarios_parse_and_run() {
    let files = shipped_scenarios();
    assert!(files.len() >= 5);
    for path in files {
        let s = Scenario::parse(&fs::read_to_string(&path).unwrap()).unwrap();
        let run = run_scenario(&s).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(run.report.connect_attempts > 0, "{}", path.display());
    }
}

#[test]
fn runs_are_deterministic_per_seed() {
    let s = scenario_file("jwt.toml");
    let a = run_scenario(&s).unwrap();
    let b = run_scenario(&s).unwrap();
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert_eq!(a.activity_log, b.activity_log);
    assert_eq!(encode_trace(&a.trace), encode_trace(&b.trace));
    let lines = |r: &authbench::harness::ScenarioRun| r.audit_log.iter().map(AuditEvent::to_line).collect::<Vec<_>>();
    assert_eq!(lines(&a), lines(&b));

    let mut other = s.clone();
    other.seed += 1;
    let c = run_scenario(&other).unwrap();
    assert_ne!(
        encode_trace(&a.trace),
        encode_trace(&c.trace),
        "fresh keys should give fresh tokens"
    );
    assert_eq!(a.report.reconnect_count, c.report.reconnect_count);
}

#[test]
fn report_totals_agree_with_raw_logs() {
    for name in [
        "username-password.toml",
        "mutual-tls.toml",
        "jwt.toml",
        "skew.toml",
        "legacy-open.toml",
    ] {
        let run = run_scenario(&scenario_file(name)).unwrap();
        let r = &run.report;
        let activity: Vec<ActivityEvent> = run
            .activity_log
            .iter()
            .map(|l| ActivityEvent::parse_line(l).unwrap())
            .collect();
        let count = |k: ActivityKind| activity.iter().filter(|e| e.kind == k).count();

        assert_eq!(count(ActivityKind::Reconnect), r.reconnect_count, "{name}");
        assert_eq!(
            (count(ActivityKind::Connect) + count(ActivityKind::Reconnect)) as u64,
            r.connect_successes,
            "{name}"
        );
        let allows = run
            .audit_log
            .iter()
            .filter(|e| e.phase == Phase::MqttConnect && e.decision == Decision::Allow)
            .count();
        assert_eq!(allows as u64, r.connect_successes, "{name}");
        assert_eq!(
            r.connect_attempts - r.connect_successes,
            count(ActivityKind::Failure) as u64,
            "{name}"
        );
        let denials = run
            .audit_log
            .iter()
            .filter(|e| e.decision == Decision::Deny)
            .filter(|e| e.phase == Phase::MqttConnect || (e.phase == Phase::TlsHandshake && e.conn.is_none()))
            .count();
        assert_eq!(r.auth_failures.values().sum::<usize>(), denials, "{name}");
        assert_eq!(r.iam_consultation_phase.values().sum::<usize>(), allows, "{name}");
        assert_eq!(r.reconnects_per_client.len(), r.clients);

        for line in run.audit_log.iter().map(AuditEvent::to_line) {
            assert_eq!(AuditEvent::parse_line(&line).unwrap().to_line(), line);
        }
        for line in &run.activity_log {
            assert_eq!(&ActivityEvent::parse_line(line).unwrap().to_string(), line);
        }
    }
}

#[test]
fn written_artifacts_reload() {
    let run = run_scenario(&scenario_file("username-password.toml")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run.write_to(dir.path()).unwrap();
    let report = MetricsReport::from_json(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report, run.report);
    let trace = decode_trace(&fs::read(dir.path().join("trace.bin")).unwrap()).unwrap();
    assert_eq!(trace, run.trace);
    let audit = fs::read_to_string(dir.path().join("audit.log")).unwrap();
    assert_eq!(audit.lines().count(), run.audit_log.len());
    let activity = fs::read_to_string(dir.path().join("activity.log")).unwrap();
    assert_eq!(activity.lines().collect::<Vec<_>>(), run.activity_log);
}

#[test]
fn comparison_csv_round_trips() {
    let reports: Vec<MetricsReport> = ["username-password.toml", "mutual-tls.toml", "jwt.toml"]
        .iter()
        .map(|n| run_scenario(&scenario_file(n)).unwrap().report)
        .collect();
    let cmp = compare_schemes(&reports).unwrap();
    assert!(cmp.warnings.is_empty());
    assert_eq!(cmp.table.columns, ["username-password", "mutual-tls", "jwt"]);
    let csv = cmp.table.to_csv();
    assert_eq!(ComparisonTable::from_csv(&csv).unwrap(), cmp.table);
    let text = cmp.table.to_text();
    for row in &cmp.table.rows {
        assert!(text.contains(&row.axis), "{}", row.axis);
    }
}

#[test]
fn legacy_open_lets_anonymous_data_through() {
    let run = run_scenario(&scenario_file("legacy-open.toml")).unwrap();
    let anonymous_publishes = run
        .audit_log
        .iter()
        .filter(|e| e.phase == Phase::Publish && e.decision == Decision::Allow && e.identity.is_none())
        .count();
    assert!(anonymous_publishes > 0);
    let delivered = run
        .trace
        .iter()
        .filter(|f| f.direction == Direction::FromBroker)
        .filter(|f| matches!(decode_packet(&f.bytes), Ok((Packet::Publish { .. }, _))))
        .count();
    assert!(delivered > 0);

    let mut closed = scenario_file("legacy-open.toml");
    closed.broker.default_policy = DefaultPolicy::DenyAll;
    let run = run_scenario(&closed).unwrap();
    assert!(run
        .audit_log
        .iter()
        .filter(|e| e.phase == Phase::Publish && e.identity.is_none())
        .all(|e| e.decision == Decision::Deny));
    assert!(!run
        .trace
        .iter()
        .any(|f| f.direction == Direction::FromBroker
            && matches!(decode_packet(&f.bytes), Ok((Packet::Publish { .. }, _)))));
}

#[test]
fn clients_only_get_in_under_their_own_scheme() {
    let modes = [AuthMode::UsernamePassword, AuthMode::MutualTls, AuthMode::Jwt];
    let schemes = [
        SchemeKind::UsernamePassword,
        SchemeKind::MutualTls,
        SchemeKind::Jwt,
        SchemeKind::Anonymous,
    ];
    for (i, mode) in modes.iter().enumerate() {
        for (j, scheme) in schemes.iter().enumerate() {
            let mut s = Scenario::new("matrix", *mode, 120);
            let mut fleet = FleetSpec::new("dev", *scheme);
            fleet.max_retries = Some(2);
            s.fleet.push(fleet);
            let r = run_scenario(&s).unwrap().report;
            let expected = if i == j { 1.0 } else { 0.0 };
            assert_eq!(r.success_rate, expected, "{mode:?} broker, {scheme:?} client");
            if i != j {
                assert!(
                    r.auth_failures.values().sum::<usize>() > 0,
                    "{mode:?} broker, {scheme:?} client"
                );
            }
        }
    }
}

#[test]
fn unregistered_devices_are_refused_in_every_mode() {
    for (mode, scheme) in [
        (AuthMode::UsernamePassword, SchemeKind::UsernamePassword),
        (AuthMode::MutualTls, SchemeKind::MutualTls),
        (AuthMode::Jwt, SchemeKind::Jwt),
    ] {
        let mut s = Scenario::new("unregistered", mode, 60);
        let mut fleet = FleetSpec::new("stranger", scheme);
        fleet.registered = false;
        fleet.max_retries = Some(1);
        s.fleet.push(fleet);
        let r = run_scenario(&s).unwrap().report;
        assert_eq!(r.connect_successes, 0, "{mode:?}");
        assert!(r.connect_attempts > 0);
    }
}

// --- TCP -------------------------------------------------------------------------------

#[derive(Clone, Default)]
struct SharedSink(Arc<Mutex<Vec<u8>>>);

impl Write for SharedSink {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().write(buf)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn tcp_round_trip(mode: AuthMode) {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    provision_demo(dir.path(), mode, 2, 0, wall_clock(), &mut rng).unwrap();
    let listener = ListenerConfig::parse(&fs::read_to_string(dir.path().join("listener.toml")).unwrap()).unwrap();
    let iam = listener.build_iam(dir.path(), &mut rng).unwrap();
    let tls = listener.server_channel(dir.path()).unwrap();
    let sink = SharedSink::default();
    let server = Server::new(Broker::new(listener.scheme(), iam), tls, Box::new(sink.clone()));
    let addr = server.spawn("127.0.0.1:0").unwrap().to_string();

    let client = |id: &str| {
        let file =
            ClientFile::parse(&fs::read_to_string(dir.path().join(format!("client-{id}.toml"))).unwrap()).unwrap();
        let (cfg, clock) = file.build(dir.path()).unwrap();
        (DeviceClient::new(cfg, clock).unwrap(), TcpEndpoint::new(addr.clone()))
    };
    let (mut sender, mut sender_ep) = client("dev-1");
    let (mut receiver, mut receiver_ep) = client("dev-2");
    receiver.connect(&mut receiver_ep, wall_clock()).unwrap();
    sender.connect(&mut sender_ep, wall_clock()).unwrap();

    let deadline = Instant::now() + Duration::from_secs(10);
    while receiver.inbox().is_empty() && Instant::now() < deadline {
        sender
            .publish(
                &mut sender_ep,
                "devices/dev-1/telemetry",
                b"21.5".to_vec(),
                wall_clock(),
            )
            .unwrap();
        std::thread::sleep(Duration::from_millis(100));
        receiver.poll(&mut receiver_ep, wall_clock());
    }
    assert_eq!(
        receiver.inbox().first(),
        Some(&("devices/dev-1/telemetry".to_owned(), b"21.5".to_vec())),
        "{mode:?}"
    );

    // outside its ACL: dropped by the broker, never delivered
    sender
        .publish(
            &mut sender_ep,
            "devices/dev-2/telemetry",
            b"spoof".to_vec(),
            wall_clock(),
        )
        .unwrap();
    std::thread::sleep(Duration::from_millis(300));
    receiver.poll(&mut receiver_ep, wall_clock());
    assert!(receiver.inbox().iter().all(|(t, _)| t == "devices/dev-1/telemetry"));

    sender.disconnect(&mut sender_ep, wall_clock());
    receiver.disconnect(&mut receiver_ep, wall_clock());
    std::thread::sleep(Duration::from_millis(100));

    let audit = String::from_utf8(sink.0.lock().unwrap().clone()).unwrap();
    let events: Vec<AuditEvent> = audit.lines().map(|l| AuditEvent::parse_line(l).unwrap()).collect();
    let connects = events
        .iter()
        .filter(|e| e.phase == Phase::MqttConnect && e.decision == Decision::Allow)
        .count();
    assert_eq!(connects, 2, "{mode:?}: {audit}");
    assert!(events
        .iter()
        .any(|e| e.phase == Phase::Publish && e.decision == Decision::Deny));
}

#[test]
fn tcp_round_trip_jwt() {
    tcp_round_trip(AuthMode::Jwt);
}

#[test]
fn tcp_round_trip_mutual_tls() {
    tcp_round_trip(AuthMode::MutualTls);
}

#[test]
fn tcp_round_trip_username_password() {
    tcp_round_trip(AuthMode::UsernamePassword);
}
