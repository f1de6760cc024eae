//! A scripted session client that drives the robot like a human would.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::wire::{ConfigFrame, ErrorFrame, Role, StateFrame, WireMessage, SCHEMA_VERSION};
use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::governor::SwitchEvent;
use crate::sim::{Driver, DriverSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientOptions {
    /// Stop after this many `state` frames.
    pub max_states: usize,
    pub max_reconnects: u32,
    /// First reconnect delay; doubled after each failed attempt.
    pub backoff: Duration,
    /// Send `label` frames from waypoint labels.
    pub send_labels: bool,
    /// Drop the connection once after this many states (testing aid).
    pub disconnect_after: Option<usize>,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            max_states: 200,
            max_reconnects: 5,
            backoff: Duration::from_millis(50),
            send_labels: true,
            disconnect_after: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ClientReport {
    pub config: Option<ConfigFrame>,
    pub states: Vec<StateFrame>,
    pub switches: Vec<SwitchEvent>,
    pub flows_frames: usize,
    pub errors: Vec<ErrorFrame>,
    /// Command send to first `state` acknowledging it, seconds.
    pub latencies: Vec<f64>,
    /// Wall time between consecutive `state` arrivals, seconds.
    pub arrival_intervals: Vec<f64>,
    pub reconnects: u32,
    /// Last sequence number sent.
    pub last_seq: u64,
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

fn connect(addr: SocketAddr) -> std::io::Result<Connection> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    Ok(Connection { writer: stream.try_clone()?, reader: BufReader::new(stream) })
}

fn send(c: &mut Connection, msg: &WireMessage) -> std::io::Result<()> {
    c.writer.write_all(msg.to_line().as_bytes())
}

/// Connect to a session at `addr` and drive it with `driver`, reacting to
/// each broadcast state. Sequence numbers keep increasing across
/// reconnects.
pub fn run_scripted_client(addr: SocketAddr, driver: DriverSpec, seed: u64, opts: &ClientOptions) -> Result<ClientReport> {
    let mut drv = Driver::new(driver, seed)?;
    let mut report = ClientReport::default();
    let mut seq = 0u64;
    let mut sent_at: HashMap<u64, Instant> = HashMap::new();
    let mut last_label;
    let mut last_arrival: Option<Instant> = None;
    let mut dropped_once = false;
    let mut attempts = 0u32;

    'session: loop {
        let mut conn = loop {
            match connect(addr) {
                Ok(c) => break c,
                Err(e) => {
                    if attempts >= opts.max_reconnects {
                        return Err(Error::Session(format!("cannot reach {addr}: {e}")));
                    }
                    let delay = opts.backoff * 2u32.pow(attempts.min(6));
                    attempts += 1;
                    debug!("connect failed ({e}); retrying in {delay:?}");
                    thread::sleep(delay);
                }
            }
        };
        // A fresh connection must re-send the label in force.
        last_label = None;
        let mut role = Role::Observer;
        let mut line = String::new();
        loop {
            line.clear();
            let read = conn.reader.read_line(&mut line);
            let now = Instant::now();
            match read {
                Ok(0) | Err(_) => {
                    if report.states.len() >= opts.max_states {
                        break 'session;
                    }
                    if attempts >= opts.max_reconnects {
                        return Err(Error::Session("connection lost and reconnect budget exhausted".into()));
                    }
                    attempts += 1;
                    report.reconnects += 1;
                    thread::sleep(opts.backoff);
                    info!("reconnecting to {addr}");
                    continue 'session;
                }
                Ok(_) => {}
            }
            let msg = WireMessage::parse(&line)?;
            match msg {
                WireMessage::Config(cfg) => {
                    if cfg.schema_version != SCHEMA_VERSION {
                        return Err(Error::VersionMismatch {
                            expected: SCHEMA_VERSION.to_string(),
                            found: cfg.schema_version.to_string(),
                        });
                    }
                    role = cfg.role;
                    report.config = Some(cfg);
                }
                WireMessage::State(st) => {
                    if let Some(prev) = last_arrival {
                        report.arrival_intervals.push(now.duration_since(prev).as_secs_f64());
                    }
                    last_arrival = Some(now);
                    if let Some(t0) = st.ack_seq.and_then(|a| sent_at.remove(&a)) {
                        report.latencies.push(now.duration_since(t0).as_secs_f64());
                        sent_at.retain(|&s, _| s > st.ack_seq.unwrap_or(0));
                    }
                    let pose = State::new(st.pose[0], st.pose[1], st.pose[2]);
                    report.states.push(st);
                    if report.states.len() >= opts.max_states {
                        break 'session;
                    }
                    if opts.disconnect_after == Some(report.states.len()) && !dropped_once {
                        dropped_once = true;
                        let _ = conn.writer.shutdown(std::net::Shutdown::Both);
                        continue;
                    }
                    if role != Role::Driver {
                        continue;
                    }
                    let obstacles = report.config.as_ref().map(|c| c.obstacles.clone()).unwrap_or_default();
                    let u = drv.command(&pose, &obstacles);
                    if opts.send_labels {
                        if let Some(l) = drv.label().filter(|l| Some(*l) != last_label) {
                            seq += 1;
                            if send(&mut conn, &WireMessage::Label { policy: l.0, seq }).is_err() {
                                continue;
                            }
                            last_label = Some(l);
                        }
                    }
                    seq += 1;
                    if send(&mut conn, &WireMessage::Cmd { v: u.v, w: u.omega, seq }).is_ok() {
                        sent_at.insert(seq, Instant::now());
                    }
                    report.last_seq = seq;
                }
                WireMessage::Switch(ev) => report.switches.push(ev),
                WireMessage::Flows(_) => report.flows_frames += 1,
                WireMessage::Error(e) => report.errors.push(e),
                WireMessage::Cmd { .. } | WireMessage::Label { .. } => {
                    return Err(Error::Session("server sent a client-only frame".into()))
                }
            }
        }
    }
    Ok(report)
}
