//! Fixed-rate session host.
//!
//! The tick loop owns all simulation state. Socket I/O happens on helper
//! threads: one acceptor, plus a reader and a writer per client. They talk
//! to the loop through channels, so a slow or dead client never delays a
//! tick.

use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use super::wire::{ConfigFrame, ErrorFrame, FlowsFrame, Role, StateFrame, WireMessage};
use crate::dynamics::Input;
use crate::error::{Error, Result};
use crate::intent::{Dataset, DatasetRow, RewardModel};
use crate::policy::PolicyId;
use crate::sim::{EpisodeLog, EpisodeRunner, LogHeader, Scenario, Selector, ENGINE_VERSION, LOG_FORMAT, LOG_VERSION};

/// Default TCP port; the CLI lets `MBCBF_PORT` override it.
pub const DEFAULT_PORT: u16 = 7878;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionOptions {
    /// Seconds of silence after which the held command drops to zero.
    pub hold_timeout: f64,
    /// Ticks between `flows` frames; 0 disables them.
    pub flows_every: u64,
    /// Stop after this many ticks.
    pub max_ticks: Option<u64>,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self { hold_timeout: 0.5, flows_every: 10, max_ticks: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub ticks: u64,
    /// Wall time between consecutive state broadcasts, seconds.
    pub intervals: Vec<f64>,
    /// Compute time of each tick, seconds.
    pub compute: Vec<f64>,
    pub stale_dropped: u64,
    pub rejected_messages: u64,
    pub clients_served: u64,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

impl SessionStats {
    /// `p`-quantile of `|interval - tick_dt|`.
    pub fn jitter_quantile(&self, tick_dt: f64, p: f64) -> f64 {
        let mut dev: Vec<f64> = self.intervals.iter().map(|i| (i - tick_dt).abs()).collect();
        dev.sort_by(f64::total_cmp);
        percentile(&dev, p)
    }

    pub fn median_compute(&self) -> f64 {
        let mut c = self.compute.clone();
        c.sort_by(f64::total_cmp);
        percentile(&c, 0.5)
    }
}

/// Everything recorded during a session.
#[derive(Debug, Clone)]
pub struct SessionReport {
    pub log: EpisodeLog,
    /// Rows for every tick on which a label was in force.
    pub dataset: Dataset,
    pub stats: SessionStats,
}

struct Client {
    id: u64,
    role: Role,
    tx: Sender<Arc<str>>,
    stream: TcpStream,
}

enum Inbound {
    Message { client: u64, msg: WireMessage },
    Gone { client: u64 },
}

type Clients = Arc<Mutex<Vec<Client>>>;

pub struct Server {
    listener: TcpListener,
}

impl Server {
    pub fn bind<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        let listener = TcpListener::bind(addr).map_err(|e| Error::Session(format!("cannot bind: {e}")))?;
        Ok(Self { listener })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Run the session until `stop` is set or `opts.max_ticks` is reached.
    pub fn run(
        self,
        sc: &Scenario,
        model: Option<&RewardModel>,
        opts: &SessionOptions,
        stop: &AtomicBool,
    ) -> Result<SessionReport> {
        sc.validate()?;
        let selector = if model.is_some() { Selector::Model } else { Selector::Labels };
        let mut runner = EpisodeRunner::new(sc, model, selector)?;
        let clients: Clients = Arc::new(Mutex::new(Vec::new()));
        let (in_tx, in_rx) = mpsc::channel::<Inbound>();
        let shutdown = Arc::new(AtomicBool::new(false));
        self.listener.set_nonblocking(true)?;

        let acceptor = {
            let clients = Arc::clone(&clients);
            let shutdown = Arc::clone(&shutdown);
            let config = ConfigFrame::new(sc, Role::Driver, opts.hold_timeout);
            let listener = self.listener;
            thread::spawn(move || accept_loop(listener, clients, in_tx, shutdown, config))
        };

        let result = tick_loop(&mut runner, sc, model, selector, opts, stop, &clients, &in_rx);

        shutdown.store(true, Ordering::SeqCst);
        for c in clients.lock().expect("client list lock").drain(..) {
            let _ = c.stream.shutdown(Shutdown::Both);
        }
        let served = acceptor.join().map_err(|_| Error::Session("acceptor thread panicked".into()))?;
        let (log, dataset, mut stats) = result?;
        stats.clients_served = served;
        Ok(SessionReport { log, dataset, stats })
    }
}

fn accept_loop(
    listener: TcpListener,
    clients: Clients,
    inbound: Sender<Inbound>,
    shutdown: Arc<AtomicBool>,
    config: ConfigFrame,
) -> u64 {
    let mut next_id = 0u64;
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let id = next_id;
                next_id += 1;
                if let Err(e) = register(stream, id, &clients, &inbound, &config) {
                    warn!("client {peer}: {e}");
                } else {
                    info!("client {id} connected from {peer}");
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(5));
            }
        }
    }
    next_id
}

fn register(
    stream: TcpStream,
    id: u64,
    clients: &Clients,
    inbound: &Sender<Inbound>,
    config: &ConfigFrame,
) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let (tx, rx) = mpsc::channel::<Arc<str>>();
    let mut list = clients.lock().expect("client list lock");
    let role = if list.iter().any(|c| c.role == Role::Driver) { Role::Observer } else { Role::Driver };
    let hello = WireMessage::Config(ConfigFrame { role, ..config.clone() }).to_line();
    // Queue the config frame before the client becomes visible to the loop,
    // so it is always the first line the client reads.
    tx.send(hello.into()).expect("receiver alive");
    let writer_stream = stream.try_clone()?;
    let reader_stream = stream.try_clone()?;
    list.push(Client { id, role, tx: tx.clone(), stream });
    drop(list);

    thread::spawn(move || writer_loop(writer_stream, rx));
    let inbound = inbound.clone();
    thread::spawn(move || reader_loop(reader_stream, id, tx, inbound));
    Ok(())
}

fn writer_loop(mut stream: TcpStream, rx: Receiver<Arc<str>>) {
    for line in rx {
        if stream.write_all(line.as_bytes()).is_err() {
            break;
        }
    }
}

fn reader_loop(stream: TcpStream, id: u64, tx: Sender<Arc<str>>, inbound: Sender<Inbound>) {
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        match WireMessage::parse(&line) {
            Ok(msg) if msg.is_client_message() => {
                if inbound.send(Inbound::Message { client: id, msg }).is_err() {
                    break;
                }
            }
            Ok(other) => {
                let frame = ErrorFrame { message: format!("clients may not send {:?} frames", kind_of(&other)), seq: None };
                let _ = tx.send(WireMessage::Error(frame).to_line().into());
            }
            Err(e) => {
                let frame = ErrorFrame { message: format!("malformed message: {e}"), seq: None };
                let _ = tx.send(WireMessage::Error(frame).to_line().into());
            }
        }
    }
    let _ = inbound.send(Inbound::Gone { client: id });
}

fn kind_of(m: &WireMessage) -> &'static str {
    match m {
        WireMessage::Config(_) => "config",
        WireMessage::State(_) => "state",
        WireMessage::Switch(_) => "switch",
        WireMessage::Flows(_) => "flows",
        WireMessage::Error(_) => "error",
        WireMessage::Cmd { .. } => "cmd",
        WireMessage::Label { .. } => "label",
    }
}

/// Driver input bookkeeping for the tick loop.
#[derive(Debug, Default)]
struct DriverInput {
    cmd: Option<(Input, Instant)>,
    cmd_seq: Option<u64>,
    label: Option<PolicyId>,
    label_seq: Option<u64>,
}

fn send_to(clients: &Clients, id: u64, msg: &WireMessage) {
    let line: Arc<str> = msg.to_line().into();
    if let Some(c) = clients.lock().expect("client list lock").iter().find(|c| c.id == id) {
        let _ = c.tx.send(line);
    }
}

fn broadcast(clients: &Clients, msg: &WireMessage) {
    let line: Arc<str> = msg.to_line().into();
    clients.lock().expect("client list lock").retain(|c| c.tx.send(Arc::clone(&line)).is_ok());
}

#[allow(clippy::too_many_arguments)]
fn handle_inbound(
    ev: Inbound,
    clients: &Clients,
    input: &mut DriverInput,
    stats: &mut SessionStats,
    m_k: usize,
    now: Instant,
) {
    let (client, msg) = match ev {
        Inbound::Gone { client } => {
            let mut list = clients.lock().expect("client list lock");
            let was_driver = list.iter().any(|c| c.id == client && c.role == Role::Driver);
            list.retain(|c| c.id != client);
            if was_driver {
                // The next connection becomes the driver and starts afresh.
                *input = DriverInput::default();
                info!("driver {client} left");
            }
            return;
        }
        Inbound::Message { client, msg } => (client, msg),
    };
    let is_driver = clients.lock().expect("client list lock").iter().any(|c| c.id == client && c.role == Role::Driver);
    let reject = |stats: &mut SessionStats, message: String, seq: Option<u64>| {
        stats.rejected_messages += 1;
        send_to(clients, client, &WireMessage::Error(ErrorFrame { message, seq }));
    };
    match msg {
        WireMessage::Cmd { v, w, seq } => {
            if !is_driver {
                reject(stats, "read-only client: commands are ignored".into(), Some(seq));
            } else if !(v.is_finite() && w.is_finite()) {
                reject(stats, "command must be finite".into(), Some(seq));
            } else if input.cmd_seq.is_some_and(|s| seq <= s) {
                stats.stale_dropped += 1;
                debug!("dropping stale cmd seq {seq}");
            } else {
                input.cmd = Some((Input::new(v, w), now));
                input.cmd_seq = Some(seq);
            }
        }
        WireMessage::Label { policy, seq } => {
            if !is_driver {
                reject(stats, "read-only client: labels are ignored".into(), Some(seq));
            } else if policy >= m_k {
                reject(stats, format!("unknown policy {policy} (m_k = {m_k})"), Some(seq));
            } else if input.label_seq.is_some_and(|s| seq <= s) {
                stats.stale_dropped += 1;
            } else {
                input.label = Some(PolicyId(policy));
                input.label_seq = Some(seq);
            }
        }
        _ => unreachable!("reader forwards client messages only"),
    }
}

/// Sleep until `deadline`, finishing with a short yield-spin for accuracy.
fn wait_until(deadline: Instant) {
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let left = deadline - now;
        if left > Duration::from_millis(2) {
            thread::sleep(left - Duration::from_millis(1));
        } else {
            thread::yield_now();
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn tick_loop(
    runner: &mut EpisodeRunner<'_>,
    sc: &Scenario,
    model: Option<&RewardModel>,
    selector: Selector,
    opts: &SessionOptions,
    stop: &AtomicBool,
    clients: &Clients,
    inbound: &Receiver<Inbound>,
) -> Result<(EpisodeLog, Dataset, SessionStats)> {
    let dt = Duration::from_secs_f64(sc.tick_dt);
    let hold = Duration::from_secs_f64(opts.hold_timeout);
    let mut input = DriverInput::default();
    let mut stats = SessionStats::default();
    let mut ticks = Vec::new();
    let mut rows = Vec::new();
    let mut last_broadcast: Option<Instant> = None;
    let mut deadline = Instant::now();

    while !stop.load(Ordering::SeqCst) && opts.max_ticks.is_none_or(|m| runner.tick() < m) {
        wait_until(deadline);
        let start = Instant::now();
        while let Ok(ev) = inbound.try_recv() {
            handle_inbound(ev, clients, &mut input, &mut stats, sc.m_k(), start);
        }
        let u_d = match input.cmd {
            Some((u, at)) if start.duration_since(at) <= hold => u,
            _ => Input::ZERO,
        };
        let x = runner.state();
        let rec = runner.step(u_d, input.label)?;
        if let Some(l) = rec.label {
            rows.push(DatasetRow { episode: 0, tick: rec.tick, gamma: rec.gamma, label: l.0, active: rec.active.0 });
        }
        if let Some(ev) = &rec.switch {
            broadcast(clients, &WireMessage::Switch(ev.clone()));
        }
        broadcast(clients, &WireMessage::State(StateFrame::from_record(&rec, &sc.thresholds, input.cmd_seq)));
        if opts.flows_every > 0 && rec.tick % opts.flows_every == 0 {
            broadcast(clients, &WireMessage::Flows(FlowsFrame::compute(rec.tick, &x, sc)));
        }
        let sent = Instant::now();
        if let Some(prev) = last_broadcast {
            stats.intervals.push(sent.duration_since(prev).as_secs_f64());
        }
        last_broadcast = Some(sent);
        stats.compute.push(sent.duration_since(start).as_secs_f64());
        ticks.push(rec);

        deadline += dt;
        // After an overrun, resume the cadence from now instead of bursting.
        let now = Instant::now();
        if deadline < now {
            deadline = now;
        }
    }
    stats.ticks = runner.tick();

    let header = LogHeader {
        format: LOG_FORMAT.into(),
        version: LOG_VERSION,
        engine_version: ENGINE_VERSION.into(),
        scenario: sc.clone(),
        driver: None,
        seed: 0,
        duration: runner.tick() as f64 * sc.tick_dt,
        selector,
        model_fingerprint: model.map(RewardModel::fingerprint),
        counterfactual: false,
    };
    let log = EpisodeLog {
        header,
        ticks,
        final_state: runner.state(),
        rejected_switches: runner.switch_state().rejected_switches,
    };
    Ok((log, Dataset::new(sc.m_k(), rows)?, stats))
}

/// Run a session on a background thread; returns the bound address, the
/// stop flag and the join handle.
pub fn spawn(
    addr: impl ToSocketAddrs,
    sc: Scenario,
    model: Option<RewardModel>,
    opts: SessionOptions,
) -> Result<(SocketAddr, Arc<AtomicBool>, thread::JoinHandle<Result<SessionReport>>)> {
    let server = Server::bind(addr)?;
    let local = server.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let handle = thread::spawn(move || server.run(&sc, model.as_ref(), &opts, &flag));
    Ok((local, stop, handle))
}
