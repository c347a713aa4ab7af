//! Protocol messages shared by the wire tests and the acceptance suite.
//!
//! The files in `fixtures/` are produced by `fixtures/make_fixtures.py`,
//! which packs them with Python's `struct` module.

use cema::nn::{AffineLayer, AffineParamSet};
use cema::wire::{Message, WireSample};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> Vec<u8> {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

pub fn golden() -> Vec<(&'static str, Message)> {
    vec![
        (
            "client_hello.bin",
            Message::ClientHello {
                edge_id: 7,
                spec_hash: [1, 2, 3, 4, 5, 6, 7, 8],
            },
        ),
        (
            "server_hello.bin",
            Message::ServerHello {
                accepted: true,
                current_version: 42,
            },
        ),
        (
            "server_hello_reject.bin",
            Message::ServerHello {
                accepted: false,
                current_version: 0,
            },
        ),
        (
            "sample_batch.bin",
            Message::SampleBatch {
                seq: 3,
                samples: vec![
                    WireSample {
                        sample_id: 10,
                        features: vec![1.0, -2.5, 0.0],
                    },
                    WireSample {
                        sample_id: 11,
                        features: vec![],
                    },
                ],
            },
        ),
        (
            "param_update.bin",
            Message::ParamUpdate(AffineParamSet {
                version: 5,
                layers: vec![
                    AffineLayer {
                        index: 0,
                        gamma: vec![1.0, 0.5],
                        beta: vec![0.0, -0.25],
                    },
                    AffineLayer {
                        index: 1,
                        gamma: vec![2.0],
                        beta: vec![0.125],
                    },
                ],
            }),
        ),
        ("ack.bin", Message::Ack { seq: 9 }),
    ]
}

fn random_reals(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<f32> {
    let n = rng.random_range(0..=max_len);
    (0..n)
        .map(|_| match rng.random_range(0..6) {
            0 => 0.0,
            1 => f32::MIN_POSITIVE,
            2 => f32::MAX * if rng.random() { 1.0 } else { -1.0 },
            3 => f32::from_bits(rng.random_range(1..0x0080_0000)), // subnormal
            _ => rng.random_range(-1e6f32..1e6),
        })
        .collect()
}

pub fn random_message(rng: &mut ChaCha8Rng) -> Message {
    match rng.random_range(0..5) {
        0 => Message::ClientHello {
            edge_id: rng.random(),
            spec_hash: rng.random(),
        },
        1 => Message::ServerHello {
            accepted: rng.random(),
            current_version: rng.random(),
        },
        2 => {
            let n = rng.random_range(0..6);
            let samples = (0..n)
                .map(|_| WireSample {
                    sample_id: rng.random(),
                    features: random_reals(rng, 40),
                })
                .collect();
            Message::SampleBatch {
                seq: rng.random(),
                samples,
            }
        }
        3 => {
            let n = rng.random_range(0..5);
            let layers = (0..n)
                .map(|_| {
                    let w = rng.random_range(0..20);
                    let gamma = (0..w).map(|_| rng.random_range(0.0f32..2.0)).collect();
                    let beta = (0..w).map(|_| rng.random_range(-3.0f32..3.0)).collect();
                    AffineLayer {
                        index: rng.random(),
                        gamma,
                        beta,
                    }
                })
                .collect();
            Message::ParamUpdate(AffineParamSet {
                version: rng.random(),
                layers,
            })
        }
        _ => Message::Ack { seq: rng.random() },
    }
}
