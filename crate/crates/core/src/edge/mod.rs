//! Edge runtime: forward-only inference over a sample stream, filtration,
//! a bounded upload queue, and parameter updates applied between batches.
//!
//! The inference loop and the transport share only the upload queue and a
//! single-slot update mailbox ([`EdgeShared`]).

mod mailbox;
mod node;
mod queue;
mod run;
mod tcp;

pub use mailbox::UpdateMailbox;
pub use node::{EdgeConfig, EdgeNode, EdgeShared, EdgeStats, Prediction};
pub use queue::{QueuedSample, UploadQueue};
pub use run::{run_offline, run_stream, EdgeRun, Offline, Uplink};
pub use tcp::{TcpUplink, TcpUplinkConfig};
