//! TCP server behaviour against raw protocol clients.

use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use cema::adapt::AdaptConfig;
use cema::cloud::{serve, ServerConfig, ServerHandle};
use cema::nn::{spec_hash, Model, ModelSpec};
use cema::wire::{self, param_update_len, Message, WireSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 6;
const CLASSES: usize = 4;

fn models() -> (Model<f32>, Model<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let f = Model::init(ModelSpec::new(DIM, vec![16, 16], CLASSES), &mut rng).unwrap();
    let e = Model::init(ModelSpec::new(DIM, vec![8], CLASSES), &mut rng).unwrap();
    (f, e)
}

fn start(max_sessions: usize) -> (ServerHandle, [u8; 8], Vec<usize>) {
    let (f, e) = models();
    let hash = spec_hash(e.spec());
    let widths = e.spec().hidden_dims.clone();
    let cfg = ServerConfig {
        listen: "127.0.0.1:0".into(),
        adapt: AdaptConfig {
            replay_draw: 8,
            ..AdaptConfig::default()
        },
        max_sessions,
        seed: 5,
    };
    (serve(cfg, f, e, None).unwrap(), hash, widths)
}

struct Client {
    stream: TcpStream,
    seq: u64,
}

impl Client {
    fn connect(addr: SocketAddr, edge_id: u32, hash: [u8; 8]) -> (Self, bool) {
        let stream = TcpStream::connect(addr).unwrap();
        stream
            .set_read_timeout(Some(Duration::from_secs(10)))
            .unwrap();
        let mut c = Client { stream, seq: 0 };
        wire::send(
            &mut c.stream,
            &Message::ClientHello {
                edge_id,
                spec_hash: hash,
            },
        )
        .unwrap();
        let accepted = match c.recv() {
            Some(Message::ServerHello { accepted, .. }) => accepted,
            other => panic!("expected hello, got {other:?}"),
        };
        (c, accepted)
    }

    fn upload(&mut self, n: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| WireSample {
                sample_id: seed * 10_000 + i as u64,
                features: (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        self.seq += 1;
        wire::send(
            &mut self.stream,
            &Message::SampleBatch {
                seq: self.seq,
                samples,
            },
        )
        .unwrap();
    }

    fn recv(&mut self) -> Option<Message> {
        wire::recv(&mut self.stream).unwrap()
    }

    /// Reads until a ParamUpdate arrives; returns its version and the acks seen.
    fn until_update(&mut self) -> (u64, Vec<u64>) {
        let mut acks = Vec::new();
        loop {
            match self.recv() {
                Some(Message::Ack { seq }) => acks.push(seq),
                Some(Message::ParamUpdate(set)) => return (set.version, acks),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    fn until_ack(&mut self, seq: u64) {
        loop {
            match self.recv() {
                Some(Message::Ack { seq: s }) if s == seq => return,
                Some(_) => {}
                None => panic!("closed before ack"),
            }
        }
    }
}

#[test]
fn two_edges_share_one_step() {
    let (mut server, hash, _) = start(8);
    let (mut a, ok_a) = Client::connect(server.local_addr(), 1, hash);
    let (mut b, ok_b) = Client::connect(server.local_addr(), 2, hash);
    assert!(ok_a && ok_b);
    a.upload(16, 1);
    a.until_ack(1);
    b.upload(16, 2);
    let (va, _) = a.until_update();
    let (vb, acks) = b.until_update();
    assert_eq!((va, vb), (1, 1));
    assert_eq!(acks, [1]);
    let report = server.shutdown();
    assert_eq!(report.cloud.steps, 1);
    assert_eq!(report.cloud.samples_ingested, 32);
    assert_eq!(report.cloud.final_version, 1);
    assert_eq!(report.broadcasts, 2);
}

#[test]
fn shutdown_before_upload_and_twice() {
    let (mut server, _, _) = start(8);
    let first = server.shutdown();
    assert_eq!((first.cloud.steps, first.cloud.final_version), (0, 0));
    assert_eq!(server.shutdown(), first);
}

#[test]
fn three_pools_three_versions_and_exact_update_size() {
    let (mut server, hash, widths) = start(8);
    let (mut a, _) = Client::connect(server.local_addr(), 1, hash);
    let mut versions = Vec::new();
    for i in 0..3 {
        a.upload(32, 10 + i);
        versions.push(a.until_update().0);
    }
    assert_eq!(versions, [1, 2, 3]);
    a.upload(20, 99);
    a.until_ack(4);
    let report = server.shutdown();
    assert_eq!((report.cloud.steps, report.cloud.final_version), (3, 3));
    assert_eq!(report.cloud.samples_discarded, 20);
    assert_eq!(report.update_bytes, param_update_len(&widths));
}

#[test]
fn spec_mismatch_and_session_limit_rejected() {
    let (mut server, hash, _) = start(1);
    let (_c, ok) = Client::connect(server.local_addr(), 1, [0; 8]);
    assert!(!ok);
    let (_a, ok) = Client::connect(server.local_addr(), 2, hash);
    assert!(ok);
    let (_b, ok) = Client::connect(server.local_addr(), 3, hash);
    assert!(!ok);
    let report = server.shutdown();
    assert_eq!((report.sessions_accepted, report.sessions_rejected), (1, 2));
}

#[test]
fn garbage_drops_only_that_connection() {
    use std::io::Write;
    let (mut server, hash, _) = start(8);
    let (mut good, _) = Client::connect(server.local_addr(), 1, hash);
    let (mut bad, _) = Client::connect(server.local_addr(), 2, hash);
    bad.stream
        .write_all(&[5, 0, 0, 0, b'X', b'Y', b'Z', 0, 0])
        .unwrap();
    assert!(wire::recv(&mut bad.stream)
        .map(|m| m.is_none())
        .unwrap_or(true));
    good.upload(32, 3);
    assert_eq!(good.until_update().0, 1);
    server.shutdown();
}

#[test]
fn disconnect_mid_broadcast_spares_others() {
    let (mut server, hash, _) = start(8);
    let (mut stay, _) = Client::connect(server.local_addr(), 1, hash);
    let (mut leave, _) = Client::connect(server.local_addr(), 2, hash);
    leave.upload(31, 4);
    leave.until_ack(1);
    // The departing edge completes the pool and vanishes without reading
    // the broadcast it triggers.
    leave.upload(1, 5);
    drop(leave);
    assert_eq!(stay.until_update().0, 1);
    stay.upload(32, 6);
    assert_eq!(stay.until_update().0, 2);
    let report = server.shutdown();
    assert_eq!(report.cloud.steps, 2);
}

#[test]
fn late_joiner_gets_latest_update() {
    let (mut server, hash, _) = start(8);
    let (mut a, _) = Client::connect(server.local_addr(), 1, hash);
    a.upload(32, 7);
    assert_eq!(a.until_update().0, 1);
    let (mut b, _) = Client::connect(server.local_addr(), 2, hash);
    assert_eq!(b.until_update().0, 1);
    assert_eq!(server.version(), 1);
    server.shutdown();
}

#[test]
fn non_increasing_sequence_drops_session() {
    let (mut server, hash, _) = start(8);
    let (mut a, _) = Client::connect(server.local_addr(), 1, hash);
    a.upload(4, 1);
    a.until_ack(1);
    a.seq = 0;
    a.upload(4, 2);
    assert!(wire::recv(&mut a.stream)
        .map(|m| m.is_none())
        .unwrap_or(true));
    server.shutdown();
}
