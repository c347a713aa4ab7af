use std::collections::HashMap;
use std::io::Write;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use super::core::{CloudCore, CloudReport, StepRecord};
use crate::adapt::{AdaptConfig, AdaptEngine};
use crate::error::{Error, Result};
use crate::net::{StopAwareReader, POLL};
use crate::nn::{spec_hash, Model};
use crate::sample::Sample;
use crate::wire::{self, Message};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub listen: String,
    pub adapt: AdaptConfig,
    pub max_sessions: usize,
    /// Seed of the replay-draw generator.
    pub seed: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:7878".into(),
            adapt: AdaptConfig::default(),
            max_sessions: 64,
            seed: 0,
        }
    }
}

/// Called on the engine thread after every adaptation step.
pub type StepHook = Box<dyn FnMut(&StepRecord) + Send>;

/// Shutdown summary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerReport {
    #[serde(flatten)]
    pub cloud: CloudReport,
    pub sessions_accepted: u64,
    pub sessions_rejected: u64,
    /// Payload size of one `ParamUpdate`, 0 before the first step.
    pub update_bytes: usize,
    pub broadcasts: u64,
}

/// Per-connection bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionState {
    pub edge_id: u32,
    pub last_seq: u64,
    pub last_version_sent: u64,
}

struct Session {
    state: SessionState,
    tx: Sender<Arc<Vec<u8>>>,
}

#[derive(Default)]
struct Registry {
    sessions: HashMap<u64, Session>,
    /// Framed bytes of the newest update, sent to sessions that join late.
    latest: Option<(u64, Arc<Vec<u8>>)>,
}

enum EngineMsg {
    Batch {
        session: u64,
        seq: u64,
        samples: Vec<Sample>,
    },
    Shutdown,
}

struct Shared {
    stop: Arc<AtomicBool>,
    registry: Mutex<Registry>,
    version: AtomicU64,
    live: AtomicUsize,
    accepted: AtomicU64,
    rejected: AtomicU64,
    sockets: Mutex<HashMap<u64, TcpStream>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn framed(msg: &Message) -> Result<Arc<Vec<u8>>> {
    let mut out = Vec::new();
    wire::send(&mut out, msg)?;
    Ok(Arc::new(out))
}

/// Running server. Dropping it without calling [`ServerHandle::shutdown`]
/// stops it as well.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    engine_tx: Sender<EngineMsg>,
    accept: Option<JoinHandle<()>>,
    engine: Option<JoinHandle<(CloudReport, usize, u64)>>,
    report: Option<ServerReport>,
}

/// Starts a cloud server adapting `foundation` and a replica of `edge`.
pub fn serve(
    cfg: ServerConfig,
    foundation: Model<f32>,
    edge: Model<f32>,
    hook: Option<StepHook>,
) -> Result<ServerHandle> {
    let hash = spec_hash(edge.spec());
    let engine = AdaptEngine::new(foundation, edge, cfg.adapt.clone(), cfg.seed)?;
    if cfg.max_sessions == 0 {
        return Err(Error::config("max_sessions must be at least 1"));
    }
    let listener = TcpListener::bind(&cfg.listen)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        stop: Arc::new(AtomicBool::new(false)),
        registry: Mutex::new(Registry::default()),
        version: AtomicU64::new(0),
        live: AtomicUsize::new(0),
        accepted: AtomicU64::new(0),
        rejected: AtomicU64::new(0),
        sockets: Mutex::new(HashMap::new()),
        threads: Mutex::new(Vec::new()),
    });
    let (engine_tx, engine_rx) = mpsc::channel();
    let engine = {
        let shared = shared.clone();
        thread::Builder::new()
            .name("cloud-engine".into())
            .spawn(move || engine_loop(CloudCore::new(engine), engine_rx, shared, hook))?
    };
    let accept = {
        let (shared, tx) = (shared.clone(), engine_tx.clone());
        let max = cfg.max_sessions;
        thread::Builder::new()
            .name("cloud-accept".into())
            .spawn(move || accept_loop(listener, shared, tx, hash, max))?
    };
    info!("cloud listening on {addr}");
    Ok(ServerHandle {
        addr,
        shared,
        engine_tx,
        accept: Some(accept),
        engine: Some(engine),
        report: None,
    })
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Parameter version of the most recent step.
    pub fn version(&self) -> u64 {
        self.shared.version.load(Ordering::SeqCst)
    }

    /// Currently connected, accepted sessions.
    pub fn sessions(&self) -> Vec<SessionState> {
        let mut v: Vec<SessionState> = lock(&self.shared.registry)
            .sessions
            .values()
            .map(|s| s.state.clone())
            .collect();
        v.sort_by_key(|s| s.edge_id);
        v
    }

    /// Stops accepting, lets the engine finish every batch already received,
    /// flushes queued frames and closes all connections. Calling it again
    /// returns the same report.
    pub fn shutdown(&mut self) -> ServerReport {
        if let Some(r) = &self.report {
            return r.clone();
        }
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        let _ = self.engine_tx.send(EngineMsg::Shutdown);
        let (cloud, update_bytes, broadcasts) = self
            .engine
            .take()
            .and_then(|h| h.join().ok())
            .unwrap_or_default();
        // Dropping the senders lets every writer flush and exit.
        lock(&self.shared.registry).sessions.clear();
        for (_, s) in lock(&self.shared.sockets).drain() {
            let _ = s.shutdown(Shutdown::Read);
        }
        let threads: Vec<JoinHandle<()>> = lock(&self.shared.threads).drain(..).collect();
        for t in threads {
            let _ = t.join();
        }
        let report = ServerReport {
            cloud,
            sessions_accepted: self.shared.accepted.load(Ordering::SeqCst),
            sessions_rejected: self.shared.rejected.load(Ordering::SeqCst),
            update_bytes,
            broadcasts,
        };
        info!(
            "cloud stopped: {} steps, version {}",
            report.cloud.steps, report.cloud.final_version
        );
        self.report = Some(report.clone());
        report
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(
    listener: TcpListener,
    shared: Arc<Shared>,
    engine: Sender<EngineMsg>,
    hash: [u8; 8],
    max: usize,
) {
    let mut next_id = 0u64;
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                next_id += 1;
                let id = next_id;
                let (shared2, engine) = (shared.clone(), engine.clone());
                let spawned = thread::Builder::new()
                    .name(format!("cloud-session-{id}"))
                    .spawn(move || {
                        if let Err(e) = session(id, stream, &shared2, engine, hash, max) {
                            debug!("session {id} from {peer} closed: {e}");
                        }
                    });
                match spawned {
                    Ok(h) => {
                        let mut threads = lock(&shared.threads);
                        threads.retain(|t| !t.is_finished());
                        threads.push(h);
                    }
                    Err(e) => warn!("could not spawn session thread: {e}"),
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(POLL / 5),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
}

fn writer_loop(mut stream: TcpStream, rx: Receiver<Arc<Vec<u8>>>) {
    for frame in rx {
        if stream
            .write_all(&frame)
            .and_then(|_| stream.flush())
            .is_err()
        {
            break;
        }
    }
    let _ = stream.shutdown(Shutdown::Write);
}

fn session(
    id: u64,
    stream: TcpStream,
    shared: &Arc<Shared>,
    engine: Sender<EngineMsg>,
    hash: [u8; 8],
    max: usize,
) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(POLL))?;
    lock(&shared.sockets).insert(id, stream.try_clone()?);
    let mut reader = StopAwareReader {
        stream: stream.try_clone()?,
        stop: shared.stop.clone(),
    };
    let hello = wire::recv(&mut reader);
    let result = run_session(id, &stream, &mut reader, hello, shared, engine, hash, max);
    lock(&shared.sockets).remove(&id);
    let _ = stream.shutdown(Shutdown::Read);
    result
}

#[allow(clippy::too_many_arguments)]
fn run_session(
    id: u64,
    stream: &TcpStream,
    reader: &mut StopAwareReader,
    hello: Result<Option<Message>>,
    shared: &Arc<Shared>,
    engine: Sender<EngineMsg>,
    hash: [u8; 8],
    max: usize,
) -> Result<()> {
    let edge_id = match hello? {
        Some(Message::ClientHello { edge_id, spec_hash }) => {
            let full = shared.live.load(Ordering::SeqCst) >= max;
            if spec_hash != hash || full {
                shared.rejected.fetch_add(1, Ordering::SeqCst);
                let reply = Message::ServerHello {
                    accepted: false,
                    current_version: shared.version.load(Ordering::SeqCst),
                };
                let mut w = stream.try_clone()?;
                let _ = wire::send(&mut w, &reply);
                let why = if full {
                    "session limit reached"
                } else {
                    "model spec mismatch"
                };
                warn!("rejected edge {edge_id}: {why}");
                return Err(Error::Protocol(format!("edge {edge_id} rejected: {why}")));
            }
            edge_id
        }
        Some(other) => {
            return Err(Error::Protocol(format!(
                "expected ClientHello, got {:?}",
                other.message_type()
            )))
        }
        None => return Ok(()),
    };
    shared.live.fetch_add(1, Ordering::SeqCst);
    shared.accepted.fetch_add(1, Ordering::SeqCst);

    let (tx, rx) = mpsc::channel::<Arc<Vec<u8>>>();
    let writer = {
        let w = stream.try_clone()?;
        thread::Builder::new()
            .name(format!("cloud-writer-{id}"))
            .spawn(move || writer_loop(w, rx))?
    };
    {
        let mut reg = lock(&shared.registry);
        let version = shared.version.load(Ordering::SeqCst);
        let _ = tx.send(framed(&Message::ServerHello {
            accepted: true,
            current_version: version,
        })?);
        let mut state = SessionState {
            edge_id,
            ..Default::default()
        };
        if let Some((v, bytes)) = &reg.latest {
            let _ = tx.send(bytes.clone());
            state.last_version_sent = *v;
        }
        reg.sessions.insert(id, Session { state, tx });
    }
    info!("edge {edge_id} joined (session {id})");

    let mut last_seq = 0u64;
    let result = loop {
        match wire::recv(reader) {
            Ok(Some(Message::SampleBatch { seq, samples })) => {
                if seq <= last_seq {
                    break Err(Error::Protocol(format!("sequence {seq} after {last_seq}")));
                }
                last_seq = seq;
                let samples = samples
                    .into_iter()
                    .map(|w| Sample::new(w.sample_id, w.features))
                    .collect();
                if engine
                    .send(EngineMsg::Batch {
                        session: id,
                        seq,
                        samples,
                    })
                    .is_err()
                {
                    break Ok(());
                }
            }
            Ok(Some(other)) => {
                break Err(Error::Protocol(format!(
                    "unexpected {:?} from edge {edge_id}",
                    other.message_type()
                )))
            }
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        }
    };
    lock(&shared.registry).sessions.remove(&id);
    shared.live.fetch_sub(1, Ordering::SeqCst);
    let _ = writer.join();
    info!("edge {edge_id} left (session {id})");
    result
}

fn engine_loop(
    mut core: CloudCore,
    rx: Receiver<EngineMsg>,
    shared: Arc<Shared>,
    mut hook: Option<StepHook>,
) -> (CloudReport, usize, u64) {
    let mut update_bytes = 0usize;
    let mut broadcasts = 0u64;
    for msg in rx {
        let (session, seq, samples) = match msg {
            EngineMsg::Batch {
                session,
                seq,
                samples,
            } => (session, seq, samples),
            EngineMsg::Shutdown => break,
        };
        let steps = core.submit(samples);
        {
            let mut reg = lock(&shared.registry);
            if let Some(s) = reg.sessions.get_mut(&session) {
                s.state.last_seq = seq;
                if let Ok(ack) = framed(&Message::Ack { seq }) {
                    let _ = s.tx.send(ack);
                }
            }
        }
        for (record, update) in steps {
            let version = update.version;
            let bytes = match framed(&Message::ParamUpdate(update)) {
                Ok(b) => b,
                Err(e) => {
                    warn!("could not encode update v{version}: {e}");
                    continue;
                }
            };
            update_bytes = bytes.len() - 4;
            let mut reg = lock(&shared.registry);
            reg.latest = Some((version, bytes.clone()));
            for s in reg.sessions.values_mut() {
                if s.tx.send(bytes.clone()).is_ok() {
                    s.state.last_version_sent = version;
                    broadcasts += 1;
                }
            }
            shared.version.store(version, Ordering::SeqCst);
            drop(reg);
            if let Some(h) = hook.as_mut() {
                h(&record);
            }
        }
    }
    (core.finish(), update_bytes, broadcasts)
}
