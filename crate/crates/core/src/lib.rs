//! Cloud-edge test-time adaptation.
//!
//! Edge nodes run forward-only inference and upload the test samples whose
//! prediction entropy falls inside a dynamic band. A cloud service adapts a
//! large foundation model on those samples by confidence-weighted entropy
//! minimization, distills it into a replica of the edge model with a replay
//! buffer, and sends back only the normalization scale and shift vectors.

pub mod adapt;
pub mod cloud;
pub mod edge;
pub mod error;
pub mod filtration;
pub mod harness;
mod net;
pub mod nn;
pub mod sample;
pub mod wire;

pub use error::{Error, Result};
pub use sample::Sample;
