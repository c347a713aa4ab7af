//! Experiment infrastructure: synthetic shifted streams, supervised
//! pretraining, metrics and end-to-end scenario runs.

mod experiment;
mod metrics;
mod pretrain;
mod stream;

pub use experiment::*;
pub use metrics::{accuracy, compute_ece, ece_from_confidence, ECE_BINS};
pub use pretrain::{evaluate, pretrain, PretrainConfig, Pretrained};
pub use stream::{
    gen_stream, load_stream, read_stream, save_stream, write_stream, Corruption, CorruptionKind,
    Generator, StreamHeader, StreamSpec, NO_LABEL, SEVERITY_SIGMA, STREAM_MAGIC, STREAM_VERSION,
};
