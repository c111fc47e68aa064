//! TCP transport for the federation roles.
//!
//! Each server runs an acceptor thread plus one reader thread per
//! connection; all frames funnel into one channel and round state is only
//! touched by the calling thread. Sites keep one connection to the server
//! (register, then receive plans and send updates over it) and, in GCML
//! mode, a listener for incoming peer transfers.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, Read};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use super::config::{Algorithm, FederationConfig};
use super::metrics::{read_jsonl, RoundMetrics};
use super::node::{AggregationServer, Coordinator, Site, SiteStatus};
use super::{coordinator_row, elapsed_ms, run_in_process_with_data, submit_to_update, OrchestrationError, RunOutcome, SiteFinal};
use crate::data::{generate_federation, FederatedDataset};
use crate::params::{read_checkpoint, ParameterVector};
use crate::training::{evaluate, LabeledDataset};
use crate::wire::{decode_payload, parse_header, write_frame, WireError, WireMessage, HEADER_LEN};

const POLL: Duration = Duration::from_millis(5);

fn spawn_acceptor(listener: TcpListener, stop: Arc<AtomicBool>, on_conn: impl Fn(TcpStream) + Send + 'static) -> io::Result<()> {
    listener.set_nonblocking(true)?;
    thread::spawn(move || {
        while !stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    if stream.set_nonblocking(false).is_ok() {
                        let _ = stream.set_nodelay(true);
                        on_conn(stream);
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    thread::sleep(POLL);
                }
            }
        }
    });
    Ok(())
}

/// Reads one frame and reports its raw type code even when the payload
/// fails to decode.
fn read_raw_frame<R: Read>(r: &mut R) -> Result<(u8, Result<WireMessage, WireError>, usize), WireError> {
    let mut header = [0u8; HEADER_LEN];
    match r.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(WireError::Closed),
        Err(e) => return Err(e.into()),
    }
    let h = parse_header(&header)?;
    let mut payload = vec![0u8; h.payload_len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::ClosedMidFrame { received: HEADER_LEN },
        _ => e.into(),
    })?;
    Ok((h.msg_type, decode_payload(h.msg_type, &payload), HEADER_LEN + h.payload_len))
}

enum HubEvent {
    Connected { conn: u64, stream: TcpStream },
    Frame { conn: u64, type_code: u8, msg: Result<WireMessage, WireError>, bytes: usize },
}

/// Server side connection multiplexer.
struct Hub {
    rx: Receiver<HubEvent>,
    stop: Arc<AtomicBool>,
    writers: BTreeMap<u64, TcpStream>,
    site_conn: BTreeMap<u64, u64>,
    inbox: Vec<u8>,
    sent: u64,
    received: u64,
}

impl Hub {
    fn start(listener: TcpListener) -> io::Result<Self> {
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let next_conn = std::sync::atomic::AtomicU64::new(0);
        spawn_acceptor(listener, Arc::clone(&stop), move |stream| {
            let conn = next_conn.fetch_add(1, Ordering::Relaxed);
            let tx: Sender<HubEvent> = tx.clone();
            let Ok(writer) = stream.try_clone() else { return };
            if tx.send(HubEvent::Connected { conn, stream: writer }).is_err() {
                return;
            }
            let mut stream = stream;
            thread::spawn(move || loop {
                match read_raw_frame(&mut stream) {
                    Ok((type_code, msg, bytes)) => {
                        if tx.send(HubEvent::Frame { conn, type_code, msg, bytes }).is_err() {
                            return;
                        }
                    }
                    Err(WireError::Closed) => return,
                    Err(e) => {
                        log::warn!("connection {conn}: {e}");
                        return;
                    }
                }
            });
        })?;
        Ok(Self {
            rx,
            stop,
            writers: BTreeMap::new(),
            site_conn: BTreeMap::new(),
            inbox: Vec::new(),
            sent: 0,
            received: 0,
        })
    }

    /// Next decoded frame before `deadline`.
    fn next(&mut self, deadline: Instant) -> Option<(u64, WireMessage)> {
        loop {
            let wait = deadline.checked_duration_since(Instant::now())?;
            match self.rx.recv_timeout(wait) {
                Ok(HubEvent::Connected { conn, stream }) => {
                    self.writers.insert(conn, stream);
                }
                Ok(HubEvent::Frame { conn, type_code, msg, bytes }) => {
                    self.inbox.push(type_code);
                    self.received += bytes as u64;
                    match msg {
                        Ok(m) => return Some((conn, m)),
                        Err(e) => log::warn!("connection {conn}: undecodable frame type {type_code}: {e}"),
                    }
                }
                Err(RecvTimeoutError::Timeout) => return None,
                Err(RecvTimeoutError::Disconnected) => return None,
            }
        }
    }

    fn send(&mut self, site_id: u64, msg: &WireMessage) {
        let Some(stream) = self.site_conn.get(&site_id).and_then(|c| self.writers.get_mut(c)) else {
            log::warn!("no connection for site {site_id}");
            return;
        };
        match write_frame(stream, msg) {
            Ok(n) => self.sent += n as u64,
            Err(e) => log::warn!("sending {} to site {site_id}: {e}", msg.kind()),
        }
    }

    fn broadcast(&mut self, msg: &WireMessage) {
        let ids: Vec<u64> = self.site_conn.keys().copied().collect();
        for id in ids {
            self.send(id, msg);
        }
    }

    fn take_bytes(&mut self) -> (u64, u64) {
        (std::mem::take(&mut self.sent), std::mem::take(&mut self.received))
    }

    /// Waits until every configured site has registered.
    fn registration_barrier(
        &mut self,
        timeout: Duration,
        mut register: impl FnMut(&WireMessage) -> Result<u64, OrchestrationError>,
        missing: impl Fn() -> Vec<u64>,
        expected: usize,
    ) -> Result<(), OrchestrationError> {
        let deadline = Instant::now() + timeout;
        while self.site_conn.len() < expected {
            let Some((conn, msg)) = self.next(deadline) else {
                return Err(OrchestrationError::RegistrationTimeout(missing()));
            };
            match register(&msg) {
                Ok(id) => {
                    log::info!("site {id} registered");
                    self.site_conn.insert(id, conn);
                }
                Err(e) => log::warn!("rejected frame during registration: {e}"),
            }
        }
        Ok(())
    }
}

impl Drop for Hub {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for s in self.writers.values() {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
    }
}

/// Centralized aggregation server loop. `test` is used for the
/// per-round metrics of the global model.
pub fn run_centralized_server(
    config: &FederationConfig,
    listener: TcpListener,
    test: Arc<LabeledDataset>,
) -> Result<RunOutcome, OrchestrationError> {
    config.validate()?;
    let mut hub = Hub::start(listener)?;
    let mut server = AggregationServer::new(config, test.clone());
    let n = config.sites.len();
    {
        let server = &mut server;
        let missing_ids: BTreeSet<u64> = config.site_ids().into_iter().collect();
        let registered = std::cell::RefCell::new(BTreeSet::new());
        hub.registration_barrier(
            config.round_timeout,
            |m| {
                let id = server.register(m)?;
                registered.borrow_mut().insert(id);
                Ok(id)
            },
            || missing_ids.difference(&registered.borrow()).copied().collect(),
            n,
        )?;
    }
    let mut out = RunOutcome::default();
    while !server.is_finished() {
        let t = Instant::now();
        let plan = server.begin_round()?;
        let round = plan.round;
        hub.broadcast(&plan.message());
        let mut pending: BTreeSet<u64> = plan.entries.iter().map(|e| e.site_id).collect();
        let global = server.global_message();
        for &id in &pending {
            hub.send(id, &global);
        }
        let mut updates = Vec::new();
        let deadline = Instant::now() + config.round_timeout;
        while !pending.is_empty() {
            let Some((_, msg)) = hub.next(deadline) else {
                log::warn!("round {round}: no update from sites {pending:?}; treating them as dropped");
                break;
            };
            match msg {
                WireMessage::SubmitUpdate { site_id, round: r, .. } if r == round && pending.contains(&site_id) => {
                    pending.remove(&site_id);
                    updates.push(submit_to_update(msg)?);
                }
                other => log::debug!("round {round}: ignoring {}", other.kind()),
            }
        }
        server.finish_round(updates)?;
        let (sent, recv) = hub.take_bytes();
        out.history.push(server.metrics_row(sent, recv, elapsed_ms(t))?);
        out.plans.push(plan);
    }
    hub.broadcast(&WireMessage::Shutdown { reason: "rounds complete".into() });
    let ev = evaluate(&config.trainer, server.global(), &test)?;
    out.final_test_loss = ev.loss;
    out.final_test_accuracy = ev.accuracy;
    out.global_model = Some(server.global().clone());
    out.server_inbox = std::mem::take(&mut hub.inbox);
    Ok(out)
}

/// Decentralized coordination server loop. It handles metadata only; any
/// parameter-bearing frame is logged and rejected.
pub fn run_coordinator(config: &FederationConfig, listener: TcpListener) -> Result<RunOutcome, OrchestrationError> {
    config.validate()?;
    let mut hub = Hub::start(listener)?;
    let mut coord = Coordinator::new(config);
    let n = config.sites.len();
    {
        let coord = &mut coord;
        let missing_ids: BTreeSet<u64> = config.site_ids().into_iter().collect();
        let registered = std::cell::RefCell::new(BTreeSet::new());
        hub.registration_barrier(
            config.round_timeout,
            |m| {
                let id = coord.register(m)?;
                registered.borrow_mut().insert(id);
                Ok(id)
            },
            || missing_ids.difference(&registered.borrow()).copied().collect(),
            n,
        )?;
    }
    let mut out = RunOutcome::default();
    while !coord.is_finished() {
        let t = Instant::now();
        let plan = coord.plan_round()?;
        let round = plan.round;
        hub.broadcast(&plan.message());
        let mut pending: BTreeSet<u64> = plan.entries.iter().map(|e| e.site_id).collect();
        let deadline = Instant::now() + config.round_timeout;
        while !pending.is_empty() {
            let Some((_, msg)) = hub.next(deadline) else {
                log::warn!("round {round}: no status from sites {pending:?}; excluding them next round");
                coord.mark_timed_out(pending.iter().copied());
                break;
            };
            match msg {
                WireMessage::StatusUpdate { site_id, round: r, .. } if r == round => {
                    coord.ingest_status(&msg)?;
                    pending.remove(&site_id);
                }
                WireMessage::StatusUpdate { .. } => coord.ingest_status(&msg)?,
                other => log::error!("round {round}: coordinator rejected {}", other.kind()),
            }
        }
        let (sent, recv) = hub.take_bytes();
        out.history.push(coordinator_row(round, sent, recv, elapsed_ms(t)));
        out.plans.push(plan);
    }
    hub.broadcast(&WireMessage::Shutdown { reason: "rounds complete".into() });
    out.server_inbox = std::mem::take(&mut hub.inbox);
    Ok(out)
}

enum SiteEvent {
    Server(Result<(WireMessage, usize), WireError>),
    Peer(WireMessage, usize),
}

/// A site's connections: the server link plus the peer listener.
struct SiteLink {
    server: TcpStream,
    rx: Receiver<SiteEvent>,
    stop: Arc<AtomicBool>,
    from_server: VecDeque<(WireMessage, usize)>,
    from_peers: Vec<(WireMessage, usize)>,
}

fn connect_retry(addr: SocketAddr, timeout: Duration) -> Result<TcpStream, OrchestrationError> {
    let deadline = Instant::now() + timeout;
    loop {
        match TcpStream::connect_timeout(&addr, Duration::from_secs(2)) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() < deadline => {
                log::debug!("connecting to {addr}: {e}; retrying");
                thread::sleep(Duration::from_millis(100));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

impl SiteLink {
    fn open(server: SocketAddr, peer_listener: Option<TcpListener>, timeout: Duration) -> Result<Self, OrchestrationError> {
        let stream = connect_retry(server, timeout)?;
        stream.set_nodelay(true)?;
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let mut reader = stream.try_clone()?;
        let server_tx = tx.clone();
        thread::spawn(move || loop {
            let r = crate::wire::read_frame(&mut reader);
            let done = r.is_err();
            if server_tx.send(SiteEvent::Server(r)).is_err() || done {
                return;
            }
        });
        if let Some(listener) = peer_listener {
            spawn_acceptor(listener, Arc::clone(&stop), move |mut stream| {
                let tx = tx.clone();
                thread::spawn(move || loop {
                    match crate::wire::read_frame(&mut stream) {
                        Ok((m, n)) => {
                            if tx.send(SiteEvent::Peer(m, n)).is_err() {
                                return;
                            }
                        }
                        Err(WireError::Closed) => return,
                        Err(e) => {
                            log::warn!("peer connection: {e}");
                            return;
                        }
                    }
                });
            })?;
        }
        Ok(Self { server: stream, rx, stop, from_server: VecDeque::new(), from_peers: Vec::new() })
    }

    fn pump(&mut self, deadline: Instant) -> Result<bool, OrchestrationError> {
        let Some(wait) = deadline.checked_duration_since(Instant::now()) else { return Ok(false) };
        match self.rx.recv_timeout(wait) {
            Ok(SiteEvent::Server(Ok(m))) => self.from_server.push_back(m),
            Ok(SiteEvent::Server(Err(e))) => return Err(e.into()),
            Ok(SiteEvent::Peer(m, n)) => self.from_peers.push((m, n)),
            Err(_) => return Ok(false),
        }
        Ok(true)
    }

    fn next_server(&mut self, timeout: Duration) -> Result<(WireMessage, usize), OrchestrationError> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(m) = self.from_server.pop_front() {
                return Ok(m);
            }
            if !self.pump(deadline)? {
                return Err(WireError::Timeout.into());
            }
        }
    }

    /// Waits for the transfer of `round` from `sender`; `None` on timeout.
    fn next_transfer(&mut self, round: u64, sender: u64, timeout: Duration) -> Result<Option<(WireMessage, usize)>, OrchestrationError> {
        let deadline = Instant::now() + timeout;
        loop {
            self.from_peers.retain(|(m, _)| !matches!(m, WireMessage::ModelTransfer { round: r, .. } if *r < round));
            if let Some(i) = self.from_peers.iter().position(|(m, _)| {
                matches!(m, WireMessage::ModelTransfer { round: r, sender_id, .. } if *r == round && *sender_id == sender)
            }) {
                return Ok(Some(self.from_peers.swap_remove(i)));
            }
            if !self.pump(deadline)? {
                return Ok(None);
            }
        }
    }

    fn send(&mut self, msg: &WireMessage) -> Result<usize, OrchestrationError> {
        Ok(write_frame(&mut self.server, msg)?)
    }
}

impl Drop for SiteLink {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        let _ = self.server.shutdown(std::net::Shutdown::Both);
    }
}

/// What a site process ends with.
#[derive(Debug, Clone)]
pub struct SiteRun {
    pub history: Vec<RoundMetrics>,
    pub params: ParameterVector,
    pub final_metrics: SiteFinal,
}

fn site_idle_timeout(config: &FederationConfig) -> Duration {
    config.round_timeout * 3
}

fn finish_site(site: &Site, history: Vec<RoundMetrics>) -> Result<SiteRun, OrchestrationError> {
    let (loss, acc) = site.test_metrics()?;
    Ok(SiteRun {
        history,
        params: site.params().clone(),
        final_metrics: SiteFinal { site_id: site.id(), train_count: site.case_count(), test_loss: loss, test_accuracy: acc },
    })
}

/// Site loop for FEDAVG / FEDPROX.
pub fn run_site_centralized(
    config: &FederationConfig,
    site_id: u64,
    server: SocketAddr,
    data: &FederatedDataset,
) -> Result<SiteRun, OrchestrationError> {
    config.validate()?;
    let mut site = Site::new(config, site_id, data)?;
    let addr = &config.sites[config.site_index(site_id)?];
    let mut link = SiteLink::open(server, None, config.round_timeout)?;
    let n = link.send(&site.register_message(&addr.host, addr.port))?;
    site.record_sent(n);
    let mut history = Vec::new();
    loop {
        let (msg, n) = link.next_server(site_idle_timeout(config))?;
        site.record_received(n);
        match msg {
            WireMessage::RoundPlan { round, entries } => {
                let t = Instant::now();
                let (status, _) = SiteStatus::from_plan(site_id, &entries);
                let active = status != SiteStatus::Dropped;
                let global = if active {
                    let (msg, n) = link.next_server(config.round_timeout)?;
                    site.record_received(n);
                    match msg {
                        WireMessage::GlobalModel { round: r, params } if r == round => Some(params),
                        other => {
                            return Err(OrchestrationError::Protocol(format!(
                                "round {round}: expected GLOBAL_MODEL, got {}",
                                other.kind()
                            )))
                        }
                    }
                } else {
                    None
                };
                if let Some(u) = site.central_round(round, active, global.as_ref())? {
                    let n = link.send(&WireMessage::SubmitUpdate {
                        site_id,
                        round,
                        case_count: u.case_count,
                        params: u.params,
                    })?;
                    site.record_sent(n);
                }
                let role = if active { "site" } else { "dropped" };
                history.push(site.metrics_row(round, role, elapsed_ms(t))?);
            }
            WireMessage::Shutdown { reason } => {
                log::info!("site {site_id}: shutdown ({reason})");
                break;
            }
            other => log::warn!("site {site_id}: unexpected {}", other.kind()),
        }
    }
    finish_site(&site, history)
}

fn resolve(host: &str, port: u16) -> io::Result<SocketAddr> {
    (host, port)
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("cannot resolve {host}:{port}")))
}

/// Site loop for GCML.
pub fn run_site_gcml(
    config: &FederationConfig,
    site_id: u64,
    server: SocketAddr,
    data: &FederatedDataset,
) -> Result<SiteRun, OrchestrationError> {
    config.validate()?;
    let mut site = Site::new(config, site_id, data)?;
    let addr = &config.sites[config.site_index(site_id)?];
    let listener = TcpListener::bind(resolve(&addr.host, addr.port)?)?;
    let port = listener.local_addr()?.port();
    let mut link = SiteLink::open(server, Some(listener), config.round_timeout)?;
    let n = link.send(&site.register_message(&addr.host, port))?;
    site.record_sent(n);
    let mut history = Vec::new();
    loop {
        let (msg, n) = link.next_server(site_idle_timeout(config))?;
        site.record_received(n);
        match msg {
            WireMessage::RoundPlan { round, entries } => {
                let t = Instant::now();
                let action = site.gcml_begin(round, &entries);
                if let Some((target, transfer)) = &action.transfer {
                    match resolve(&target.host, target.port)
                        .map_err(OrchestrationError::from)
                        .and_then(|a| Ok(TcpStream::connect_timeout(&a, config.read_timeout)?))
                        .and_then(|mut s| Ok(write_frame(&mut s, transfer)?))
                    {
                        Ok(n) => site.record_sent(n),
                        Err(e) => log::warn!("round {round}: transfer to site {} failed: {e}", target.site_id),
                    }
                }
                if let Some(from) = action.await_from {
                    match link.next_transfer(round, from, config.read_timeout)? {
                        Some((WireMessage::ModelTransfer { params, .. }, n)) => {
                            site.record_received(n);
                            site.gcml_receive(&params)?;
                        }
                        _ => log::warn!("round {round}: no transfer from site {from}; idling"),
                    }
                }
                if let Some(status) = site.gcml_finish(round, action.status)? {
                    let n = link.send(&status)?;
                    site.record_sent(n);
                }
                history.push(site.metrics_row(round, action.status.label(), elapsed_ms(t))?);
            }
            WireMessage::Shutdown { reason } => {
                log::info!("site {site_id}: shutdown ({reason})");
                break;
            }
            other => log::warn!("site {site_id}: unexpected {}", other.kind()),
        }
    }
    finish_site(&site, history)
}

/// Dispatches to the site loop matching the configured algorithm.
pub fn run_site(
    config: &FederationConfig,
    site_id: u64,
    server: SocketAddr,
    data: &FederatedDataset,
) -> Result<SiteRun, OrchestrationError> {
    match config.algorithm {
        Algorithm::Fedavg | Algorithm::Fedprox => run_site_centralized(config, site_id, server, data),
        Algorithm::Gcml => run_site_gcml(config, site_id, server, data),
        other => Err(OrchestrationError::Protocol(format!("{} has no site role", other.as_str()))),
    }
}

/// Runs the server role matching the configured algorithm.
pub fn run_server(config: &FederationConfig, listener: TcpListener, data: &FederatedDataset) -> Result<RunOutcome, OrchestrationError> {
    match config.algorithm {
        Algorithm::Fedavg | Algorithm::Fedprox => run_centralized_server(config, listener, data.test.clone()),
        Algorithm::Gcml => run_coordinator(config, listener),
        other => Err(OrchestrationError::Protocol(format!("{} has no server role", other.as_str()))),
    }
}

fn merge_site_runs(out: &mut RunOutcome, runs: Vec<SiteRun>) {
    let mut rows = Vec::new();
    for run in runs {
        out.site_models.insert(run.final_metrics.site_id, run.params);
        out.site_finals.push(run.final_metrics);
        rows.extend(run.history);
    }
    out.history.extend(rows);
    out.history.sort_by_key(|r| (r.round, r.site_id.is_none(), r.site_id));
    out.site_finals.sort_by_key(|f| f.site_id);
    if out.global_model.is_none() {
        let n = out.site_finals.len() as f64;
        out.final_test_loss = out.site_finals.iter().map(|f| f.test_loss).sum::<f64>() / n;
        out.final_test_accuracy = out.site_finals.iter().map(|f| f.test_accuracy).sum::<Option<f64>>().map(|a| a / n);
    }
}

/// Socket mode on the loopback interface with every site on its own
/// thread. The baselines have no network roles and run in process.
pub fn run_socket_threads(config: &FederationConfig) -> Result<RunOutcome, OrchestrationError> {
    config.validate()?;
    let data = generate_federation(&config.layout)?;
    if !matches!(config.algorithm, Algorithm::Fedavg | Algorithm::Fedprox | Algorithm::Gcml) {
        return run_in_process_with_data(config, &data);
    }
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let server_addr = listener.local_addr()?;
    let data = Arc::new(data);
    let handles: Vec<_> = config
        .site_ids()
        .into_iter()
        .map(|id| {
            let (config, data) = (config.clone(), Arc::clone(&data));
            thread::spawn(move || run_site(&config, id, server_addr, &data))
        })
        .collect();
    let served = run_server(config, listener, &data);
    let mut runs = Vec::new();
    let mut failure = None;
    for h in handles {
        match h.join() {
            Ok(Ok(run)) => runs.push(run),
            Ok(Err(e)) => failure = Some(OrchestrationError::SiteFailed(e.to_string())),
            Err(_) => failure = Some(OrchestrationError::SiteFailed("site thread panicked".into())),
        }
    }
    let mut out = served?;
    if let Some(e) = failure {
        return Err(e);
    }
    merge_site_runs(&mut out, runs);
    Ok(out)
}

pub fn site_model_path(dir: &Path, site_id: u64) -> PathBuf {
    dir.join(format!("site{site_id}_model.bin"))
}

pub fn site_metrics_path(dir: &Path, site_id: u64) -> PathBuf {
    dir.join(format!("site{site_id}_metrics.jsonl"))
}

/// Launches `exe site --config .. --id .. --server .. --out ..` per site.
pub fn spawn_site_processes(
    exe: &Path,
    config_path: &Path,
    site_ids: &[u64],
    server: SocketAddr,
    out_dir: &Path,
) -> io::Result<Vec<(u64, Child)>> {
    site_ids
        .iter()
        .map(|&id| {
            let child = Command::new(exe)
                .arg("site")
                .arg("--config")
                .arg(config_path)
                .arg("--id")
                .arg(id.to_string())
                .arg("--server")
                .arg(server.to_string())
                .arg("--out")
                .arg(out_dir)
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .spawn()?;
            Ok((id, child))
        })
        .collect()
}

/// Socket mode with one OS process per site. The server runs on the
/// calling thread; each child writes its model and metrics into
/// `out_dir`, which are collected into the outcome.
pub fn run_socket_processes(
    config: &FederationConfig,
    config_path: &Path,
    exe: &Path,
    out_dir: &Path,
) -> Result<RunOutcome, OrchestrationError> {
    config.validate()?;
    let data = generate_federation(&config.layout)?;
    if !matches!(config.algorithm, Algorithm::Fedavg | Algorithm::Fedprox | Algorithm::Gcml) {
        return run_in_process_with_data(config, &data);
    }
    std::fs::create_dir_all(out_dir)?;
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let server_addr = listener.local_addr()?;
    let ids = config.site_ids();
    let mut children = spawn_site_processes(exe, config_path, &ids, server_addr, out_dir)?;
    let served = run_server(config, listener, &data);
    if served.is_err() {
        for (_, c) in &mut children {
            let _ = c.kill();
        }
    }
    let mut failed = Vec::new();
    for (id, c) in &mut children {
        let status = c.wait()?;
        if !status.success() {
            failed.push(format!("site {id} exited with {status}"));
        }
    }
    let mut out = served?;
    if !failed.is_empty() {
        return Err(OrchestrationError::SiteFailed(failed.join("; ")));
    }
    let mut runs = Vec::new();
    for (idx, &id) in ids.iter().enumerate() {
        let params = read_checkpoint(&site_model_path(out_dir, id))?;
        let history = read_jsonl(&site_metrics_path(out_dir, id))?;
        let ev = evaluate(&config.trainer, &params, &data.test)?;
        runs.push(SiteRun {
            history,
            params,
            final_metrics: SiteFinal {
                site_id: id,
                train_count: data.sites[idx].train.len() as u64,
                test_loss: ev.loss,
                test_accuracy: ev.accuracy,
            },
        });
    }
    merge_site_runs(&mut out, runs);
    Ok(out)
}
