use std::error::Error;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use rand::rngs::OsRng;

use authbench::broker::config::ListenerConfig;
use authbench::broker::{AuthMode, Broker};
use authbench::client::config::ClientFile;
use authbench::client::DeviceClient;
use authbench::harness::{
    analyze_trace, chain_cost_sweep, compare_schemes, decode_trace, run_scenario, MetricsReport, Scenario,
};
use authbench::net::{wall_clock, Server};
use authbench::provision::provision_demo;
use authbench::transport::TcpEndpoint;

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "authbench", version, about = "MQTT client authentication test bench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    UsernamePassword,
    MutualTls,
    Jwt,
}

impl From<ModeArg> for AuthMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::UsernamePassword => AuthMode::UsernamePassword,
            ModeArg::MutualTls => AuthMode::MutualTls,
            ModeArg::Jwt => AuthMode::Jwt,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario under the simulated clock.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for report.json, audit.log, activity.log and trace.bin.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-packet-type predictability of a captured plaintext trace.
    Analyze {
        trace: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Tabulate two or more scenario reports side by side.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Handshake size as a function of server chain length.
    SweepChains {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a broker listener over TCP in real time.
    Serve {
        config: PathBuf,
        #[arg(long, default_value = "0.0.0.0")]
        bind: String,
        /// Append audit lines here instead of stdout.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Run one device client against a TCP listener in real time.
    Connect {
        config: PathBuf,
        /// Seconds to stay connected.
        #[arg(long, default_value_t = 60)]
        duration: u64,
    },
    /// Generate demo keys, certificates and config files.
    Provision {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, default_value_t = 2)]
        devices: usize,
        #[arg(long, default_value_t = 8883)]
        port: u16,
    },
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(scenario: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let mut s = Scenario::parse(&fs::read_to_string(scenario)?)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let run = run_scenario(&s)?;
    match out {
        Some(dir) => {
            run.write_to(dir)?;
            let r = &run.report;
            println!(
                "scenario {} ({}), {} clients, {} s",
                r.scenario, r.scheme, r.clients, r.duration
            );
            println!(
                "  connect success rate  {:.3} ({}/{})",
                r.success_rate, r.connect_successes, r.connect_attempts
            );
            println!("  reconnects            {}", r.reconnect_count);
            match r.handshake_bytes {
                Some(b) => println!("  handshake bytes       min {} mean {:.1} max {}", b.min, b.mean, b.max),
                None => println!("  handshake bytes       - (plaintext)"),
            }
            println!("  identity in clear     {}", r.cleartext_identity_exposed);
            println!("  wrote {}", dir.display());
        }
        None => print!("{}", run.report.to_json()),
    }
    Ok(())
}

fn analyze(trace: &Path, json: bool) -> Result<()> {
    let report = analyze_trace(&decode_trace(&fs::read(trace)?)?);
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    println!(
        "{:<12} {:>7} {:>9} {:>12} {:>12}",
        "type", "frames", "distinct", "max bits", "total bits"
    );
    for (name, v) in &report.packets {
        println!(
            "{:<12} {:>7} {:>9} {:>12.3} {:>12.3}",
            name,
            v.frame_count,
            v.distinct_patterns,
            v.max_entropy(),
            v.total_entropy()
        );
    }
    Ok(())
}

fn compare(paths: &[PathBuf], csv: Option<&Path>) -> Result<()> {
    let reports = paths
        .iter()
        .map(|p| Ok(MetricsReport::from_json(&fs::read_to_string(p)?)?))
        .collect::<Result<Vec<_>>>()?;
    let comparison = compare_schemes(&reports)?;
    for w in &comparison.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", comparison.table.to_text());
    if let Some(path) = csv {
        fs::write(path, comparison.table.to_csv())?;
    }
    Ok(())
}

fn sweep(lengths: &[usize], seed: u64) -> Result<()> {
    println!("length,chain_bytes,handshake_bytes");
    for c in chain_cost_sweep(lengths, seed)? {
        println!("{},{},{}", c.length, c.chain_bytes, c.handshake_bytes);
    }
    Ok(())
}

fn serve(config: &Path, bind: &str, audit: Option<&Path>) -> Result<()> {
    let cfg = ListenerConfig::parse(&fs::read_to_string(config)?)?;
    let base = base_dir(config);
    let iam = cfg.build_iam(&base, &mut OsRng)?;
    let tls = cfg.server_channel(&base)?;
    let sink: Box<dyn Write + Send> = match audit {
        Some(p) => Box::new(fs::OpenOptions::new().create(true).append(true).open(p)?),
        None => Box::new(std::io::stdout()),
    };
    let server = Server::new(Broker::new(cfg.scheme(), iam), tls, sink);
    let addr = format!("{bind}:{}", cfg.port());
    eprintln!("listening on {addr} ({})", cfg.mode);
    server.serve(std::net::TcpListener::bind(&addr)?)?;
    Ok(())
}

fn connect(config: &Path, duration: u64) -> Result<()> {
    let file = ClientFile::parse(&fs::read_to_string(config)?)?;
    let (cfg, clock) = file.build(&base_dir(config))?;
    let mut ep = TcpEndpoint::new(file.broker.clone());
    let mut client = DeviceClient::new(cfg, clock)?;
    let start = wall_clock();
    let end = start + duration;
    client.start(&mut ep, start);
    let (mut logged, mut received) = (0, 0);
    loop {
        for e in &client.activity_log()[logged..] {
            println!("{e}");
        }
        logged = client.activity_log().len();
        for (topic, payload) in &client.inbox()[received..] {
            println!("message topic={topic} payload={}", String::from_utf8_lossy(payload));
        }
        received = client.inbox().len();
        let now = wall_clock();
        if now >= end || client.gave_up() {
            break;
        }
        match client.next_wakeup() {
            Some(t) if t <= now => client.on_tick(&mut ep, now),
            _ => {
                client.poll(&mut ep, now);
                thread::sleep(Duration::from_millis(200));
            }
        }
    }
    client.disconnect(&mut ep, wall_clock());
    if let Some(e) = client.activity_log().last() {
        println!("{e}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, seed, out } => run(&scenario, seed, out.as_deref()),
        Command::Analyze { trace, json } => analyze(&trace, json),
        Command::Compare { reports, csv } => compare(&reports, csv.as_deref()),
        Command::SweepChains { lengths, seed } => sweep(&lengths, seed),
        Command::Serve { config, bind, audit } => serve(&config, &bind, audit.as_deref()),
        Command::Connect { config, duration } => connect(&config, duration),
        Command::Provision {
            out,
            mode,
            devices,
            port,
        } => provision_demo(&out, mode.into(), devices, port, wall_clock(), &mut OsRng)
            .map(|files| {
                for f in files {
                    println!("{}", f.display());
                }
            })
            .map_err(Into::into),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
