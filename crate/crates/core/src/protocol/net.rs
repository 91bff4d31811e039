//! TCP transport: a threaded server around [`Coordinator`] and a polling
//! client loop around [`ClientNode`].
//!
//! Logical time is simulated, so the server waits on the wall clock only to
//! let uploads arrive. The wall deadline is the logical one scaled by
//! `time_scale` and clamped to `[min_wait, round_timeout]`.

use std::collections::{BTreeMap, BTreeSet};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::client::ClientNode;
use super::coordinator::{Coordinator, Phase, RoundOutcome};
use super::message::{read_frame, write_frame, Directive, RoundStatus, RpcMessage};
use super::ProtocolError;
use crate::device::ClientId;
use crate::model::{load_flat_weights, FlatWeights};

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub rounds: usize,
    /// Wall seconds per logical second when waiting for uploads.
    pub time_scale: f64,
    pub min_wait: Duration,
    pub round_timeout: Duration,
    /// How long to wait for every client to report a context.
    pub report_timeout: Duration,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            rounds: 1,
            time_scale: 1e-4,
            min_wait: Duration::from_secs(1),
            round_timeout: Duration::from_secs(30),
            report_timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub poll_interval: Duration,
    pub connect_timeout: Duration,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            poll_interval: Duration::from_millis(2),
            connect_timeout: Duration::from_secs(10),
        }
    }
}

struct Shared {
    coord: Coordinator,
    finished: bool,
    results: BTreeMap<u64, (RoundStatus, FlatWeights)>,
    acked: BTreeSet<ClientId>,
}

type State = Arc<(Mutex<Shared>, Condvar)>;

fn lock(state: &State) -> MutexGuard<'_, Shared> {
    state.0.lock().unwrap_or_else(|p| p.into_inner())
}

/// Blocks until `done` holds or `timeout` passes; returns whether it held.
fn wait_until(state: &State, timeout: Duration, done: impl Fn(&Shared) -> bool) -> bool {
    let end = Instant::now() + timeout;
    let mut guard = lock(state);
    loop {
        if done(&guard) {
            return true;
        }
        let now = Instant::now();
        if now >= end {
            return false;
        }
        guard = state
            .1
            .wait_timeout(guard, end - now)
            .unwrap_or_else(|p| p.into_inner())
            .0;
    }
}

fn reply(s: &mut Shared, msg: RpcMessage) -> RpcMessage {
    let client_id = msg.client_id().clone();
    let round = msg.round();
    let current = s.coord.round() as u64;
    let phase = s.coord.phase();
    let error = |message: String| RpcMessage::Error {
        client_id: client_id.clone(),
        round,
        message,
    };
    match msg {
        RpcMessage::CommunicatedTextReq { report, .. } => {
            let directive = if s.finished {
                s.acked.insert(client_id.clone());
                Directive::Finished
            } else if round > current || (round == current && phase == Phase::Idle) {
                Directive::Pending
            } else if round < current {
                Directive::Wait
            } else {
                if phase == Phase::Collecting && !s.coord.has_reported(&client_id) {
                    if let Err(e) = s.coord.receive_context(&client_id, report) {
                        return error(e.to_string());
                    }
                }
                s.coord.directive(&client_id)
            };
            RpcMessage::CommunicatedTextResp {
                client_id,
                round,
                directive,
            }
        }
        RpcMessage::GetGlobalWeightsReq { .. } => {
            if round != current || phase != Phase::Training {
                return error(format!("global weights for round {round} are not available"));
            }
            RpcMessage::GetGlobalWeightsResp {
                client_id,
                round,
                manifest: s.coord.manifest().to_vec(),
                weights: s.coord.global_flat(),
            }
        }
        RpcMessage::GetFLWeightsReq {
            update: Some(update),
            ..
        } => {
            if round != current || phase != Phase::Training {
                return error(format!("upload for round {round} arrived after the round closed"));
            }
            match s.coord.receive_update(&client_id, update) {
                Ok(()) => RpcMessage::GetFLWeightsResp {
                    client_id,
                    round,
                    status: RoundStatus::Pending,
                    weights: FlatWeights(Vec::new()),
                },
                Err(e) => error(e.to_string()),
            }
        }
        RpcMessage::GetFLWeightsReq { update: None, .. } => match s.results.get(&round) {
            Some((status, weights)) => RpcMessage::GetFLWeightsResp {
                client_id,
                round,
                status: *status,
                weights: weights.clone(),
            },
            None => RpcMessage::GetFLWeightsResp {
                client_id,
                round,
                status: RoundStatus::Pending,
                weights: FlatWeights(Vec::new()),
            },
        },
        other => error(format!("unexpected message type 0x{:02x}", other.msg_type())),
    }
}

fn handle_connection(mut stream: TcpStream, state: State, stop: Arc<AtomicBool>) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(Duration::from_millis(200)));
    while !stop.load(Ordering::SeqCst) {
        let msg = match read_frame(&mut stream) {
            Ok(m) => m,
            Err(ProtocolError::Io(e)) if e.contains("timed out") || e.contains("would block") => {
                continue
            }
            Err(e) => {
                debug!("connection closed: {e}");
                return;
            }
        };
        let resp = {
            let mut guard = lock(&state);
            reply(&mut guard, msg)
        };
        state.1.notify_all();
        if let Err(e) = write_frame(&mut stream, &resp) {
            debug!("write failed: {e}");
            return;
        }
    }
}

/// Runs `opts.rounds` rounds over TCP and returns the per-round outcomes and
/// the final coordinator.
pub fn serve(
    listener: TcpListener,
    coordinator: Coordinator,
    opts: &ServerOptions,
) -> Result<(Vec<RoundOutcome>, Coordinator), ProtocolError> {
    let state: State = Arc::new((
        Mutex::new(Shared {
            coord: coordinator,
            finished: false,
            results: BTreeMap::new(),
            acked: BTreeSet::new(),
        }),
        Condvar::new(),
    ));
    let stop = Arc::new(AtomicBool::new(false));
    listener.set_nonblocking(true)?;
    let acceptor = {
        let state = state.clone();
        let stop = stop.clone();
        thread::spawn(move || {
            let mut handlers = Vec::new();
            while !stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        debug!("connection from {peer}");
                        if stream.set_nonblocking(false).is_err() {
                            continue;
                        }
                        let (state, stop) = (state.clone(), stop.clone());
                        handlers.push(thread::spawn(move || handle_connection(stream, state, stop)));
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        thread::sleep(Duration::from_millis(2))
                    }
                    Err(e) => warn!("accept failed: {e}"),
                }
            }
            for h in handlers {
                let _ = h.join();
            }
        })
    };

    let mut outcomes = Vec::with_capacity(opts.rounds);
    let run = (|| -> Result<(), ProtocolError> {
        for t in 0..opts.rounds {
            lock(&state).coord.begin_round(t);
            state.1.notify_all();
            if !wait_until(&state, opts.report_timeout, |s| s.coord.all_reported()) {
                warn!("round {t}: not every client reported; marking the rest unavailable");
            }
            let wall = {
                let mut s = lock(&state);
                s.coord.fill_missing_reports();
                s.coord.close_collection()?;
                s.coord
                    .deadline()
                    .map(|d| Duration::from_secs_f64((d * opts.time_scale).max(0.0)))
                    .unwrap_or(opts.round_timeout)
                    .clamp(opts.min_wait, opts.round_timeout.max(opts.min_wait))
            };
            state.1.notify_all();
            if !wait_until(&state, wall, |s| s.coord.awaiting().is_empty()) {
                info!("round {t}: wall deadline passed with uploads outstanding");
            }
            let outcome = {
                let mut s = lock(&state);
                let outcome = s.coord.finalize()?;
                let weights = s.coord.global_flat();
                s.results.insert(t as u64, (outcome.status(), weights));
                outcome
            };
            state.1.notify_all();
            let stalled = outcome.stalled;
            outcomes.push(outcome);
            if stalled {
                warn!("round {t} stalled; stopping");
                break;
            }
        }
        Ok(())
    })();

    lock(&state).finished = true;
    state.1.notify_all();
    let n_clients = lock(&state).coord.clients().len();
    wait_until(&state, opts.report_timeout.min(Duration::from_secs(5)), |s| {
        s.acked.len() >= n_clients
    });
    stop.store(true, Ordering::SeqCst);
    let _ = acceptor.join();
    run?;
    let shared = Arc::try_unwrap(state)
        .map_err(|_| ProtocolError::Session("server state still shared".into()))?
        .0
        .into_inner()
        .unwrap_or_else(|p| p.into_inner());
    Ok((outcomes, shared.coord))
}

/// What a client saw in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRound {
    pub round: usize,
    pub directive: Directive,
    pub uploaded: bool,
    pub died: bool,
    pub status: Option<RoundStatus>,
}

struct Conn {
    stream: TcpStream,
}

impl Conn {
    fn open(addr: SocketAddr, timeout: Duration) -> Result<Self, ProtocolError> {
        let end = Instant::now() + timeout;
        loop {
            match TcpStream::connect(addr) {
                Ok(stream) => {
                    stream.set_nodelay(true)?;
                    return Ok(Self { stream });
                }
                Err(e) if Instant::now() < end => {
                    debug!("connect to {addr} failed ({e}); retrying");
                    thread::sleep(Duration::from_millis(50));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn call(&mut self, msg: &RpcMessage) -> Result<RpcMessage, ProtocolError> {
        write_frame(&mut self.stream, msg)?;
        match read_frame(&mut self.stream)? {
            RpcMessage::Error { message, .. } => Err(ProtocolError::Session(message)),
            resp => Ok(resp),
        }
    }
}

/// Participates in rounds until the server answers `Finished`.
pub fn run_client(
    addr: SocketAddr,
    mut node: ClientNode,
    opts: &ClientOptions,
) -> Result<(Vec<ClientRound>, ClientNode), ProtocolError> {
    let mut conn = Conn::open(addr, opts.connect_timeout)?;
    let id = node.id().clone();
    let mut log = Vec::new();
    for t in 0usize.. {
        let report = node.report(t);
        let directive = loop {
            let resp = conn.call(&RpcMessage::CommunicatedTextReq {
                client_id: id.clone(),
                round: t as u64,
                report: report.clone(),
            })?;
            match resp {
                RpcMessage::CommunicatedTextResp {
                    directive: Directive::Pending,
                    ..
                } => thread::sleep(opts.poll_interval),
                RpcMessage::CommunicatedTextResp { directive, .. } => break directive,
                other => {
                    return Err(ProtocolError::Session(format!(
                        "unexpected reply 0x{:02x}",
                        other.msg_type()
                    )))
                }
            }
        };
        let mut entry = ClientRound {
            round: t,
            directive,
            uploaded: false,
            died: false,
            status: None,
        };
        match directive {
            Directive::Finished => return Ok((log, node)),
            Directive::Selected { epochs } => {
                let global = match conn.call(&RpcMessage::GetGlobalWeightsReq {
                    client_id: id.clone(),
                    round: t as u64,
                })? {
                    RpcMessage::GetGlobalWeightsResp {
                        manifest, weights, ..
                    } => load_flat_weights(&weights, &manifest)
                        .map_err(|e| ProtocolError::Payload(e.to_string()))?,
                    _ => return Err(ProtocolError::Session("expected global weights".into())),
                };
                let result = node.train(t, &global, epochs)?;
                entry.died = result.run.died;
                if let Some(update) = result.update {
                    match conn.call(&RpcMessage::GetFLWeightsReq {
                        client_id: id.clone(),
                        round: t as u64,
                        update: Some(update),
                    }) {
                        Ok(_) => entry.uploaded = true,
                        Err(ProtocolError::Session(m)) => warn!("{id}: upload rejected: {m}"),
                        Err(e) => return Err(e),
                    }
                }
                loop {
                    match conn.call(&RpcMessage::GetFLWeightsReq {
                        client_id: id.clone(),
                        round: t as u64,
                        update: None,
                    })? {
                        RpcMessage::GetFLWeightsResp {
                            status: RoundStatus::Pending,
                            ..
                        } => thread::sleep(opts.poll_interval),
                        RpcMessage::GetFLWeightsResp { status, .. } => {
                            entry.status = Some(status);
                            break;
                        }
                        _ => return Err(ProtocolError::Session("expected round result".into())),
                    }
                }
            }
            Directive::Wait | Directive::RoundSkipped | Directive::Pending => {}
        }
        node.end_round();
        log.push(entry);
    }
    unreachable!("round loop only exits on Finished")
}
