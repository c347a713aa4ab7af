use std::io;
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::node::EdgeShared;
use super::queue::QueuedSample;
use super::run::Uplink;
use crate::error::{Error, Result};
use crate::net::{StopAwareReader, POLL};
use crate::wire::{self, Message, WireSample, MAX_PAYLOAD};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(1);

#[derive(Debug, Default)]
struct Status {
    uploads: AtomicU64,
    sent_seq: AtomicU64,
    acked_seq: AtomicU64,
    rejected: AtomicBool,
    error: Mutex<Option<String>>,
    socket: Mutex<Option<TcpStream>>,
}

impl Status {
    fn fail(&self, msg: String) {
        warn!("{msg}");
        *self.error.lock().unwrap_or_else(|e| e.into_inner()) = Some(msg);
    }

    fn close_socket(&self) {
        if let Some(s) = self.socket.lock().unwrap_or_else(|e| e.into_inner()).take() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

/// Background transport to a cloud server over TCP.
///
/// A transport thread owns the connection: it performs the hello exchange,
/// drains the shared queue into one `SampleBatch` per wake-up, and a reader
/// thread posts incoming updates to the mailbox. Lost connections are
/// retried; samples whose send failed go back into the queue.
pub struct TcpUplink {
    status: Arc<Status>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    flush_timeout: Duration,
}

/// Connection parameters for [`TcpUplink`].
#[derive(Debug, Clone)]
pub struct TcpUplinkConfig {
    pub addr: String,
    pub edge_id: u32,
    pub spec_hash: [u8; 8],
    pub reconnect_delay: Duration,
    pub flush_timeout: Duration,
    /// Largest number of features per sample, used to split oversized batches.
    pub input_dim: usize,
}

impl TcpUplink {
    pub fn start(cfg: TcpUplinkConfig, shared: Arc<EdgeShared>) -> Result<Self> {
        let status = Arc::new(Status::default());
        let stop = Arc::new(AtomicBool::new(false));
        let (st, sp) = (status.clone(), stop.clone());
        let flush_timeout = cfg.flush_timeout;
        let handle = thread::Builder::new()
            .name(format!("edge-{}-transport", cfg.edge_id))
            .spawn(move || transport_loop(cfg, shared, st, sp))?;
        Ok(Self {
            status,
            stop,
            handle: Some(handle),
            flush_timeout,
        })
    }

    /// Number of `SampleBatch` messages acknowledged by the cloud.
    pub fn acked(&self) -> u64 {
        self.status.acked_seq.load(Ordering::SeqCst)
    }

    fn shutdown(&mut self, shared: &EdgeShared) {
        self.stop.store(true, Ordering::SeqCst);
        shared.wake();
        self.status.close_socket();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpUplink {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.status.close_socket();
    }
}

impl Uplink for TcpUplink {
    fn after_batch(&mut self, _: &EdgeShared) -> Result<()> {
        Ok(())
    }

    fn finish(&mut self, shared: &EdgeShared) -> Result<()> {
        let deadline = Instant::now() + self.flush_timeout;
        while Instant::now() < deadline && !self.status.rejected.load(Ordering::SeqCst) {
            let flushed = shared.queue_len() == 0
                && self.status.acked_seq.load(Ordering::SeqCst)
                    >= self.status.sent_seq.load(Ordering::SeqCst);
            if flushed {
                break;
            }
            thread::sleep(Duration::from_millis(5));
        }
        self.shutdown(shared);
        Ok(())
    }

    fn uploads(&self) -> u64 {
        self.status.uploads.load(Ordering::SeqCst)
    }

    fn failure(&self) -> Option<String> {
        self.status
            .error
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }
}

fn connect(addr: &str) -> io::Result<TcpStream> {
    let mut last = io::Error::new(io::ErrorKind::NotFound, format!("no address for {addr}"));
    for a in addr.to_socket_addrs()? {
        match TcpStream::connect_timeout(&a, CONNECT_TIMEOUT) {
            Ok(s) => return Ok(s),
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn sleep_unless_stopped(d: Duration, stop: &AtomicBool) {
    let end = Instant::now() + d;
    while !stop.load(Ordering::SeqCst) && Instant::now() < end {
        thread::sleep(POLL.min(d));
    }
}

fn transport_loop(
    cfg: TcpUplinkConfig,
    shared: Arc<EdgeShared>,
    status: Arc<Status>,
    stop: Arc<AtomicBool>,
) {
    let per_sample = 8 + 4 + 4 * cfg.input_dim;
    let max_batch = ((MAX_PAYLOAD - 64) / per_sample).max(1);
    let mut seq = 0u64;
    while !stop.load(Ordering::SeqCst) {
        let stream = match connect(&cfg.addr) {
            Ok(s) => s,
            Err(e) => {
                debug!("edge {}: connect to {} failed: {e}", cfg.edge_id, cfg.addr);
                sleep_unless_stopped(cfg.reconnect_delay, &stop);
                continue;
            }
        };
        match session(&cfg, &stream, &shared, &status, &stop, &mut seq, max_batch) {
            Ok(()) => {}
            Err(Error::Protocol(msg)) if status.rejected.load(Ordering::SeqCst) => {
                status.fail(msg);
                let _ = stream.shutdown(Shutdown::Both);
                return;
            }
            Err(e) => debug!("edge {}: session ended: {e}", cfg.edge_id),
        }
        let _ = stream.shutdown(Shutdown::Both);
        status
            .socket
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .take();
        if !stop.load(Ordering::SeqCst) {
            sleep_unless_stopped(cfg.reconnect_delay, &stop);
        }
    }
}

fn session(
    cfg: &TcpUplinkConfig,
    stream: &TcpStream,
    shared: &Arc<EdgeShared>,
    status: &Arc<Status>,
    stop: &Arc<AtomicBool>,
    seq: &mut u64,
    max_batch: usize,
) -> Result<()> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(POLL))?;
    *status.socket.lock().unwrap_or_else(|e| e.into_inner()) = Some(stream.try_clone()?);
    let mut reader = StopAwareReader {
        stream: stream.try_clone()?,
        stop: stop.clone(),
    };
    let mut writer = stream.try_clone()?;

    wire::send(
        &mut writer,
        &Message::ClientHello {
            edge_id: cfg.edge_id,
            spec_hash: cfg.spec_hash,
        },
    )?;
    match wire::recv(&mut reader)? {
        Some(Message::ServerHello {
            accepted: true,
            current_version,
        }) => {
            info!(
                "edge {}: connected to {}, cloud at version {current_version}",
                cfg.edge_id, cfg.addr
            );
        }
        Some(Message::ServerHello {
            accepted: false, ..
        }) => {
            status.rejected.store(true, Ordering::SeqCst);
            return Err(Error::Protocol(format!(
                "cloud {} rejected edge {}",
                cfg.addr, cfg.edge_id
            )));
        }
        Some(other) => {
            return Err(Error::Protocol(format!(
                "expected ServerHello, got {:?}",
                other.message_type()
            )))
        }
        None => return Err(Error::Protocol("cloud closed during hello".into())),
    }

    let alive = Arc::new(AtomicBool::new(true));
    let reader_thread = {
        let (shared, status, alive) = (shared.clone(), status.clone(), alive.clone());
        thread::Builder::new()
            .name(format!("edge-{}-reader", cfg.edge_id))
            .spawn(move || {
                loop {
                    match wire::recv(&mut reader) {
                        Ok(Some(Message::ParamUpdate(set))) => {
                            shared.deliver(set);
                        }
                        Ok(Some(Message::Ack { seq })) => {
                            status.acked_seq.fetch_max(seq, Ordering::SeqCst);
                        }
                        Ok(Some(other)) => {
                            warn!("unexpected {:?} from cloud", other.message_type());
                            break;
                        }
                        Ok(None) | Err(_) => break,
                    }
                }
                alive.store(false, Ordering::SeqCst);
                shared.wake();
            })?
    };

    let mut result = Ok(());
    while alive.load(Ordering::SeqCst) && !stop.load(Ordering::SeqCst) {
        let items = shared.wait_take_all(POLL);
        if items.is_empty() {
            continue;
        }
        let mut rest = items;
        while !rest.is_empty() {
            let tail = rest.split_off(rest.len().min(max_batch));
            if let Err(e) = send_batch(&mut writer, &rest, seq, status) {
                shared.enqueue(rest);
                shared.enqueue(tail);
                result = Err(e);
                break;
            }
            rest = tail;
        }
        if result.is_err() {
            break;
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
    let _ = reader_thread.join();
    result
}

fn send_batch(
    writer: &mut TcpStream,
    items: &[QueuedSample],
    seq: &mut u64,
    status: &Status,
) -> Result<()> {
    let next = *seq + 1;
    let samples = items
        .iter()
        .map(|q| WireSample {
            sample_id: q.sample.id,
            features: q.sample.features.clone(),
        })
        .collect();
    wire::send(writer, &Message::SampleBatch { seq: next, samples })?;
    *seq = next;
    status.sent_seq.store(next, Ordering::SeqCst);
    status
        .uploads
        .fetch_add(items.len() as u64, Ordering::SeqCst);
    Ok(())
}
