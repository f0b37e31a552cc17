//! Parameter server and client over TCP.
//!
//! Session: each client sends HELLO; once all clients have joined the server
//! sends CONFIG and GLOBAL(0). Every round the clients upload LOCAL(c), the
//! server averages and broadcasts GLOBAL(c), and the clients answer with
//! METRICS(c). DONE carries the final parameters. Any violation is answered
//! with ERROR and ends the session.

use std::collections::{BTreeMap, VecDeque};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use super::wire::{error_code, read_message, write_message, Message, PROTOCOL_VERSION};
use super::{
    aggregate, early_accept_reached, initialize, ClientRoundReport, FedConfig, FedOutcome, LocalClient, LocalUpdate,
    RoundReport,
};
use crate::dataset::{ClientDataset, Split};
use crate::error::{Error, Result};
use crate::neural::{ModelParams, Network};

struct Peer {
    id: u32,
    stream: TcpStream,
}

/// Frames from the per-client reader threads, plus frames that arrived ahead
/// of the phase they belong to.
struct Inbox {
    rx: Receiver<(u32, Result<(Message, usize)>)>,
    early: VecDeque<(u32, Message)>,
}

/// A failure together with the ERROR code sent to the clients.
struct Abort(u16, Error);

impl From<Error> for Abort {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Timeout(_) => error_code::TIMEOUT,
            Error::Protocol(_) => error_code::MALFORMED,
            _ => error_code::CLIENT_FAILURE,
        };
        Abort(code, e)
    }
}

#[derive(Default)]
struct Traffic {
    sent: u64,
    received: u64,
}

/// Runs one federated session on an already bound listener.
pub fn serve(listener: &TcpListener, cfg: &FedConfig) -> Result<FedOutcome> {
    cfg.validate()?;
    if cfg.weighted_average {
        return Err(Error::invalid("size-weighted averaging needs sample counts the wire protocol does not carry"));
    }
    let net = Network::new(cfg.arch.clone())?;
    let timeout = Duration::from_secs(cfg.timeout_secs);
    let mut traffic = Traffic::default();
    let mut peers = accept_clients(listener, cfg, &net, timeout, &mut traffic)?;
    peers.sort_by_key(|p| p.id);

    let (tx, rx) = mpsc::channel();
    for p in &peers {
        let mut reader = p.stream.try_clone()?;
        reader.set_read_timeout(None)?;
        let tx = tx.clone();
        let id = p.id;
        thread::spawn(move || loop {
            let msg = read_message(&mut reader);
            let failed = msg.is_err();
            if tx.send((id, msg)).is_err() || failed {
                break;
            }
        });
    }
    drop(tx);

    let mut inbox = Inbox { rx, early: VecDeque::new() };
    let result = coordinate(cfg, &net, &mut peers, &mut inbox, timeout, &mut traffic);
    if let Err(Abort(code, e)) = &result {
        log::error!("session aborted: {e}");
        let msg = Message::Error { code: *code, message: e.to_string() };
        for p in &mut peers {
            let _ = write_message(&mut p.stream, &msg);
        }
    }
    for p in &peers {
        let _ = p.stream.shutdown(std::net::Shutdown::Both);
    }
    result.map_err(|Abort(_, e)| e)
}

fn accept_clients(
    listener: &TcpListener,
    cfg: &FedConfig,
    net: &Network,
    timeout: Duration,
    traffic: &mut Traffic,
) -> Result<Vec<Peer>> {
    let deadline = Instant::now() + timeout;
    listener.set_nonblocking(true)?;
    let mut peers: Vec<Peer> = Vec::with_capacity(cfg.clients);
    while peers.len() < cfg.clients {
        let (mut stream, addr) = match listener.accept() {
            Ok(s) => s,
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(Error::Timeout(format!(
                        "{} of {} clients joined before the deadline",
                        peers.len(),
                        cfg.clients
                    )));
                }
                thread::sleep(Duration::from_millis(10));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        stream.set_nonblocking(false)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        let hello = match read_message(&mut stream) {
            Ok((m, n)) => {
                traffic.received += n as u64;
                m
            }
            Err(e) => {
                log::warn!("dropping connection from {addr}: {e}");
                continue;
            }
        };
        let reject = |stream: &mut TcpStream, code: u16, message: String| {
            log::warn!("rejecting {addr}: {message}");
            let _ = write_message(stream, &Message::Error { code, message });
        };
        match hello {
            Message::Hello { protocol_version, .. } if protocol_version != PROTOCOL_VERSION => reject(
                &mut stream,
                error_code::VERSION_MISMATCH,
                format!("protocol version {protocol_version}, server speaks {PROTOCOL_VERSION}"),
            ),
            Message::Hello { arch_hash, .. } if arch_hash != net.arch_hash() => reject(
                &mut stream,
                error_code::ARCH_MISMATCH,
                format!("architecture {arch_hash:#018x}, server uses {:#018x}", net.arch_hash()),
            ),
            Message::Hello { client_id, .. } if peers.iter().any(|p| p.id == client_id) => reject(
                &mut stream,
                error_code::DUPLICATE_CLIENT,
                format!("client id {client_id} is already connected"),
            ),
            Message::Hello { client_id, .. } => {
                log::info!("client {client_id} joined from {addr}");
                peers.push(Peer { id: client_id, stream });
            }
            other => reject(
                &mut stream,
                error_code::MALFORMED,
                format!("expected HELLO, got {:?}", other.message_type()),
            ),
        }
    }
    listener.set_nonblocking(false)?;
    Ok(peers)
}

fn broadcast(peers: &mut [Peer], msg: &Message, traffic: &mut Traffic) -> Result<()> {
    for p in peers {
        traffic.sent += write_message(&mut p.stream, msg)? as u64;
    }
    Ok(())
}

/// Waits for one frame from every peer, validated by `accept`. A peer that
/// already answered may start the next phase; its frames are held back.
fn gather<T>(
    peers: &[Peer],
    inbox: &mut Inbox,
    timeout: Duration,
    traffic: &mut Traffic,
    what: &str,
    mut accept: impl FnMut(u32, Message) -> std::result::Result<T, Abort>,
) -> std::result::Result<BTreeMap<u32, T>, Abort> {
    let deadline = Instant::now() + timeout;
    let mut got = BTreeMap::new();
    let mut held = VecDeque::new();
    while got.len() < peers.len() {
        let (id, msg) = match inbox.early.pop_front() {
            Some(m) => m,
            None => {
                let left = deadline.saturating_duration_since(Instant::now());
                let (id, msg) = match inbox.rx.recv_timeout(left) {
                    Ok(m) => m,
                    Err(RecvTimeoutError::Timeout) => {
                        let missing: Vec<u32> = peers.iter().map(|p| p.id).filter(|id| !got.contains_key(id)).collect();
                        return Err(Error::Timeout(format!("no {what} from clients {missing:?}")).into());
                    }
                    Err(RecvTimeoutError::Disconnected) => {
                        return Err(Error::protocol("all client connections closed").into());
                    }
                };
                let (msg, n) = msg.map_err(|e| Error::protocol(format!("client {id}: {e}")))?;
                traffic.received += n as u64;
                (id, msg)
            }
        };
        if let Message::Error { code, message } = msg {
            return Err(Abort(code, Error::protocol(format!("client {id} reported error {code}: {message}"))));
        }
        if got.contains_key(&id) {
            held.push_back((id, msg));
            continue;
        }
        let value = accept(id, msg)?;
        got.insert(id, value);
    }
    held.extend(inbox.early.drain(..));
    inbox.early = held;
    Ok(got)
}

fn coordinate(
    cfg: &FedConfig,
    net: &Network,
    peers: &mut [Peer],
    inbox: &mut Inbox,
    timeout: Duration,
    traffic: &mut Traffic,
) -> std::result::Result<FedOutcome, Abort> {
    let initial = initialize(net, cfg.seed);
    let config = Message::Config {
        rounds: cfg.rounds as u32,
        local_epochs: cfg.local_epochs as u32,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
    };
    broadcast(peers, &config, traffic)?;
    broadcast(peers, &Message::Global { round: 0, params: initial.values.clone() }, traffic)?;

    let local_for = |round: usize| {
        let arch_hash = net.arch_hash();
        let count = net.param_count();
        move |id: u32, msg: Message| match msg {
            Message::Local { round: r, client_id, params, train_loss, val_loss }
                if r as usize == round && client_id == id =>
            {
                if params.len() != count {
                    return Err(Abort(
                        error_code::MALFORMED,
                        Error::Shape(format!("client {id} uploaded {} parameters, expected {count}", params.len())),
                    ));
                }
                Ok((ModelParams { arch_hash, values: params }, train_loss, val_loss))
            }
            Message::Local { round: r, client_id, .. } => Err(Abort(
                error_code::STALE_ROUND,
                Error::protocol(format!("LOCAL for round {r} from client {client_id} on connection {id}, expected round {round}")),
            )),
            other => Err(Abort(
                error_code::MALFORMED,
                Error::protocol(format!("expected LOCAL from client {id}, got {:?}", other.message_type())),
            )),
        }
    };

    let mut global = initial.clone();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut round_globals = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let (sent0, recv0) = (traffic.sent, traffic.received);
        let t0 = Instant::now();
        let locals = gather(peers, inbox, timeout, traffic, "LOCAL", local_for(round))?;
        let t1 = Instant::now();
        let updates: Vec<LocalUpdate> = locals
            .iter()
            .map(|(&id, (p, _, _))| LocalUpdate {
                round,
                client_id: id,
                params: p.clone(),
                train_samples: 0,
                epochs: Vec::new(),
            })
            .collect();
        global = aggregate(cfg, &updates)?;
        let t2 = Instant::now();
        broadcast(peers, &Message::Global { round: round as u32, params: global.values.clone() }, traffic)?;
        let metrics = gather(peers, inbox, timeout, traffic, "METRICS", |id, msg| match msg {
            Message::Metrics { round: r, client_id, test_accuracy, confusion } if r as usize == round && client_id == id => {
                Ok((test_accuracy, confusion))
            }
            Message::Metrics { round: r, .. } => Err(Abort(
                error_code::STALE_ROUND,
                Error::protocol(format!("METRICS for round {r} from client {id}, expected round {round}")),
            )),
            other => Err(Abort(
                error_code::MALFORMED,
                Error::protocol(format!("expected METRICS from client {id}, got {:?}", other.message_type())),
            )),
        })?;
        let clients = locals
            .iter()
            .map(|(&id, (_, train_loss, val_loss))| {
                let (test_accuracy, confusion) = metrics[&id];
                ClientRoundReport {
                    client_id: id,
                    epochs: Vec::new(),
                    train_loss: *train_loss,
                    val_loss: *val_loss,
                    test_accuracy,
                    confusion,
                }
            })
            .collect();
        let report = RoundReport {
            round,
            clients,
            train_seconds: (t1 - t0).as_secs_f64(),
            aggregate_seconds: (t2 - t1).as_secs_f64(),
            bytes_sent: traffic.sent - sent0,
            bytes_received: traffic.received - recv0,
        };
        log::info!(
            "round {round}: mean val loss {:.5}, mean test accuracy {:.4}, {} B out / {} B in",
            report.mean_val_loss(),
            report.mean_test_accuracy(),
            report.bytes_sent,
            report.bytes_received
        );
        round_globals.push(global.clone());
        let stop = early_accept_reached(cfg, &report);
        rounds.push(report);
        if stop {
            log::info!("early-accept threshold reached after round {round}");
            if round < cfg.rounds {
                // Clients have already started the next round; drain it.
                gather(peers, inbox, timeout, traffic, "LOCAL", local_for(round + 1))?;
            }
            break;
        }
    }
    broadcast(peers, &Message::Done { params: global.values.clone() }, traffic)?;
    Ok(FedOutcome { initial, global, rounds, round_globals })
}

/// Client view of a finished session.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSession {
    pub client_id: u32,
    pub global: ModelParams,
    pub rounds: Vec<ClientRoundReport>,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

fn connect(addr: &str, timeout: Duration) -> Result<TcpStream> {
    let deadline = Instant::now() + timeout;
    loop {
        let addrs: Vec<_> = addr.to_socket_addrs()?.collect();
        let mut last = None;
        for a in &addrs {
            match TcpStream::connect_timeout(a, Duration::from_secs(5)) {
                Ok(s) => return Ok(s),
                Err(e) => last = Some(e),
            }
        }
        if Instant::now() >= deadline {
            return Err(match last {
                Some(e) => Error::Timeout(format!("could not reach {addr}: {e}")),
                None => Error::invalid(format!("{addr} resolves to no address")),
            });
        }
        thread::sleep(Duration::from_millis(100));
    }
}

/// Joins a session as `client_id`, training on `data`. Rounds, epochs,
/// learning rate and seed come from the server's CONFIG; batch size, class
/// weighting, architecture and timeout from `local`.
pub fn join(addr: &str, client_id: u32, data: &ClientDataset, local: &FedConfig) -> Result<ClientSession> {
    let net = Network::new(local.arch.clone())?;
    if data.indices(Split::Train).is_empty() {
        return Err(Error::invalid(format!("client {client_id} has an empty training split")));
    }
    let timeout = Duration::from_secs(local.timeout_secs);
    let mut stream = connect(addr, timeout)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(timeout))?;
    let mut sent = 0u64;
    let mut received = 0u64;
    let mut send = |stream: &mut TcpStream, m: &Message| -> Result<()> {
        sent += write_message(stream, m)? as u64;
        Ok(())
    };
    let mut recv = |stream: &mut TcpStream| -> Result<Message> {
        let (m, n) = read_message(stream)?;
        received += n as u64;
        if let Message::Error { code, message } = &m {
            return Err(Error::protocol(format!("server error {code}: {message}")));
        }
        Ok(m)
    };

    send(
        &mut stream,
        &Message::Hello { client_id, arch_hash: net.arch_hash(), protocol_version: PROTOCOL_VERSION },
    )?;
    let cfg = match recv(&mut stream)? {
        Message::Config { rounds, local_epochs, learning_rate, seed } => FedConfig {
            rounds: rounds as usize,
            local_epochs: local_epochs as usize,
            learning_rate,
            seed,
            ..local.clone()
        },
        other => return Err(Error::protocol(format!("expected CONFIG, got {:?}", other.message_type()))),
    };
    cfg.validate()?;
    let to_params = |values: Vec<f64>| -> Result<ModelParams> {
        if values.len() != net.param_count() {
            return Err(Error::Shape(format!("server sent {} parameters, expected {}", values.len(), net.param_count())));
        }
        Ok(ModelParams { arch_hash: net.arch_hash(), values })
    };
    let mut global = match recv(&mut stream)? {
        Message::Global { round: 0, params } => to_params(params)?,
        other => return Err(Error::protocol(format!("expected GLOBAL(0), got {other:?}"))),
    };
    let mut client = LocalClient::new(client_id, &net, data, &cfg)?;
    let mut rounds = Vec::new();
    let mut done = None;
    for round in 1..=cfg.rounds {
        let update = match client.train_round(&global, round) {
            Ok(u) => u,
            Err(e) => {
                let _ = send(&mut stream, &Message::Error { code: error_code::CLIENT_FAILURE, message: e.to_string() });
                return Err(e);
            }
        };
        send(
            &mut stream,
            &Message::Local {
                round: round as u32,
                client_id,
                params: update.params.values.clone(),
                train_loss: update.train_loss(),
                val_loss: update.val_loss(),
            },
        )?;
        match recv(&mut stream)? {
            Message::Global { round: r, params } if r as usize == round => global = to_params(params)?,
            Message::Done { params } => {
                done = Some(to_params(params)?);
                break;
            }
            other => return Err(Error::protocol(format!("expected GLOBAL({round}), got {other:?}"))),
        }
        let ev = client.test(&global)?;
        send(
            &mut stream,
            &Message::Metrics { round: round as u32, client_id, test_accuracy: ev.accuracy, confusion: ev.confusion },
        )?;
        rounds.push(ClientRoundReport {
            client_id,
            train_loss: update.train_loss(),
            val_loss: update.val_loss(),
            epochs: update.epochs,
            test_accuracy: ev.accuracy,
            confusion: ev.confusion,
        });
    }
    let final_params = match done {
        Some(p) => p,
        None => match recv(&mut stream)? {
            Message::Done { params } => to_params(params)?,
            other => return Err(Error::protocol(format!("expected DONE, got {other:?}"))),
        },
    };
    if final_params != global {
        return Err(Error::protocol("DONE parameters differ from the last broadcast"));
    }
    Ok(ClientSession { client_id, global: final_params, rounds, bytes_sent: sent, bytes_received: received })
}
