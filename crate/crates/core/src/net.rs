//! Wall-clock TCP listener around [`Broker`].
//!
//! Each connection gets a reader thread (handshake, record opening, packet
//! decoding) and a writer thread (record sealing). Packets of one connection
//! reach the broker in arrival order; the broker itself sits behind a mutex.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::rngs::OsRng;

use crate::broker::{Action, Broker, CloseReason, ConnId, ConnectionInfo};
use crate::channel::{server_handshake_over, EstablishedChannel, RecordReader, RecordWriter, ServerChannelConfig};
use crate::mqtt::{encode_packet, Packet, StreamDecoder};

pub fn wall_clock() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

enum Outgoing {
    Packet(Packet),
    Close,
}

struct Core {
    broker: Broker,
    audit_cursor: usize,
    audit_sink: Box<dyn Write + Send>,
}

impl Core {
    fn flush_audit(&mut self) {
        let log = self.broker.audit_log();
        for e in &log[self.audit_cursor..] {
            let _ = writeln!(self.audit_sink, "{}", e.to_line());
        }
        self.audit_cursor = log.len();
        let _ = self.audit_sink.flush();
    }
}

pub struct Server {
    core: Mutex<Core>,
    writers: Mutex<HashMap<ConnId, Sender<Outgoing>>>,
    tls: Option<ServerChannelConfig>,
}

impl Server {
    /// `tls: None` serves plaintext MQTT. Audit lines go to `audit_sink` as
    /// they are produced.
    pub fn new(broker: Broker, tls: Option<ServerChannelConfig>, audit_sink: Box<dyn Write + Send>) -> Arc<Self> {
        Arc::new(Server {
            core: Mutex::new(Core {
                broker,
                audit_cursor: 0,
                audit_sink,
            }),
            writers: Mutex::new(HashMap::new()),
            tls,
        })
    }

    fn with_broker<T>(&self, f: impl FnOnce(&mut Broker) -> T) -> T {
        let mut core = self.core.lock().expect("broker lock poisoned");
        let out = f(&mut core.broker);
        core.flush_audit();
        out
    }

    fn dispatch(&self, actions: Vec<Action>) {
        let writers = self.writers.lock().expect("writer map poisoned");
        for action in actions {
            let (conn, msg) = match action {
                Action::Send(conn, p) => (conn, Outgoing::Packet(p)),
                Action::Close(conn, _) => (conn, Outgoing::Close),
            };
            if let Some(tx) = writers.get(&conn) {
                let _ = tx.send(msg);
            }
        }
    }

    /// Accepts connections forever. A sweeper thread expires idle sessions.
    pub fn serve(self: &Arc<Self>, listener: TcpListener) -> io::Result<()> {
        let sweeper = Arc::clone(self);
        thread::spawn(move || loop {
            thread::sleep(Duration::from_millis(500));
            let expired = sweeper.with_broker(|b| b.keep_alive_sweep(wall_clock()));
            let actions = expired
                .into_iter()
                .map(|c| Action::Close(c, CloseReason::KeepAliveExpired))
                .collect();
            sweeper.dispatch(actions);
        });
        for stream in listener.incoming() {
            let stream = stream?;
            let server = Arc::clone(self);
            thread::spawn(move || server.handle(stream));
        }
        Ok(())
    }

    /// Binds, then serves on a background thread; returns the bound address.
    pub fn spawn(self: &Arc<Self>, addr: &str) -> io::Result<SocketAddr> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let server = Arc::clone(self);
        thread::spawn(move || server.serve(listener));
        Ok(local)
    }

    fn handle(&self, mut stream: TcpStream) {
        let _ = stream.set_nodelay(true);
        let _ = stream.set_read_timeout(Some(Duration::from_secs(30)));
        let secure_channel: Option<EstablishedChannel> = match &self.tls {
            Some(cfg) => match server_handshake_over(&mut stream, cfg, wall_clock(), &mut OsRng) {
                Ok((ch, _)) => Some(ch),
                Err(e) => {
                    self.with_broker(|b| b.record_handshake_failure(e.code(), wall_clock()));
                    let _ = stream.shutdown(Shutdown::Both);
                    return;
                }
            },
            None => None,
        };
        let _ = stream.set_read_timeout(None);
        let info = ConnectionInfo {
            secure: secure_channel.is_some(),
            peer_identity: secure_channel.as_ref().and_then(|c| c.peer_identity.clone()),
        };
        let conn = self.with_broker(|b| b.open_connection(info, wall_clock()));
        let (writer, reader) = match secure_channel {
            Some(ch) => {
                let (w, r) = ch.split();
                (Some(w), Some(r))
            }
            None => (None, None),
        };
        let Ok(write_half) = stream.try_clone() else { return };
        let (tx, rx) = channel();
        self.writers.lock().expect("writer map poisoned").insert(conn, tx);
        let writer_thread = thread::spawn(move || write_loop(write_half, writer, rx));

        self.read_loop(conn, stream, reader);

        self.with_broker(|b| b.close_connection(conn));
        if let Some(tx) = self.writers.lock().expect("writer map poisoned").remove(&conn) {
            let _ = tx.send(Outgoing::Close);
        }
        let _ = writer_thread.join();
    }

    fn read_loop(&self, conn: ConnId, mut stream: TcpStream, mut reader: Option<RecordReader>) {
        let mut decoder = StreamDecoder::default();
        let mut buf = [0u8; 4096];
        loop {
            let plain = match &mut reader {
                Some(r) => match EstablishedChannel::read_frame(&mut stream).and_then(|f| r.open(&f)) {
                    Ok(p) => p,
                    Err(_) => return,
                },
                None => match stream.read(&mut buf) {
                    Ok(0) | Err(_) => return,
                    Ok(n) => buf[..n].to_vec(),
                },
            };
            decoder.push(&plain);
            loop {
                match decoder.next_packet() {
                    Ok(Some(packet)) => {
                        let actions = self.with_broker(|b| b.handle_packet(conn, packet, wall_clock()));
                        let closing = actions.iter().any(|a| matches!(a, Action::Close(c, _) if *c == conn));
                        self.dispatch(actions);
                        if closing {
                            return;
                        }
                    }
                    Ok(None) => break,
                    Err(_) => return,
                }
            }
        }
    }
}

fn write_loop(mut stream: TcpStream, mut writer: Option<RecordWriter>, rx: Receiver<Outgoing>) {
    for msg in rx {
        match msg {
            Outgoing::Packet(p) => {
                let Ok(bytes) = encode_packet(&p) else { continue };
                let frame = match &mut writer {
                    Some(w) => w.seal(&bytes),
                    None => bytes,
                };
                if stream.write_all(&frame).is_err() {
                    break;
                }
            }
            Outgoing::Close => break,
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}
