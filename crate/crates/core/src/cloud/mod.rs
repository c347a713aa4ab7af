//! Cloud service: pools uploads from all edges into adaptation batches,
//! runs the adaptation engine and broadcasts each new set of affine
//! parameters to every connected edge.

mod core;
mod loopback;
mod server;

pub use self::core::{CloudCore, CloudReport, StepRecord};
pub use loopback::LoopbackUplink;
pub use server::{serve, ServerConfig, ServerHandle, ServerReport, SessionState, StepHook};
