use std::time::Duration;

use log::warn;

use super::node::{EdgeConfig, EdgeNode, EdgeShared, EdgeStats, Prediction};
use crate::error::Result;
use crate::sample::Sample;

/// Link between the inference loop and a cloud.
///
/// The inference loop only touches the shared queue and mailbox; an uplink
/// decides when queued samples leave and when updates arrive.
pub trait Uplink {
    /// Whether selected samples should be queued at all.
    fn accepts_uploads(&self) -> bool {
        true
    }

    /// Called after each batch's selected samples have been queued.
    fn after_batch(&mut self, shared: &EdgeShared) -> Result<()>;

    /// End of stream: flush what can be flushed and stop.
    fn finish(&mut self, shared: &EdgeShared) -> Result<()>;

    /// Samples handed to the cloud so far.
    fn uploads(&self) -> u64;

    /// Reason the link gave up, if it did.
    fn failure(&self) -> Option<String> {
        None
    }
}

/// No cloud: inference only, nothing queued.
#[derive(Debug, Default)]
pub struct Offline;

impl Uplink for Offline {
    fn accepts_uploads(&self) -> bool {
        false
    }

    fn after_batch(&mut self, _: &EdgeShared) -> Result<()> {
        Ok(())
    }

    fn finish(&mut self, _: &EdgeShared) -> Result<()> {
        Ok(())
    }

    fn uploads(&self) -> u64 {
        0
    }
}

/// Result of running a stream through an edge node.
#[derive(Debug, Clone)]
pub struct EdgeRun {
    pub predictions: Vec<Prediction>,
    pub stats: EdgeStats,
    pub transport_error: Option<String>,
}

/// Runs the stream in batches of `cfg.batch_size`.
///
/// Before each batch the latest mailbox update (if any) is applied, so every
/// prediction in a batch uses the version held at the batch's start.
pub fn run_stream<U: Uplink + ?Sized>(
    node: &mut EdgeNode,
    stream: &[Sample],
    cfg: &EdgeConfig,
    shared: &EdgeShared,
    uplink: &mut U,
) -> Result<EdgeRun> {
    cfg.validate()?;
    let mut stats = EdgeStats::default();
    let mut predictions = Vec::with_capacity(stream.len());
    for (i, chunk) in stream.chunks(cfg.batch_size).enumerate() {
        if i > 0 && cfg.batch_interval_ms > 0 {
            std::thread::sleep(Duration::from_millis(cfg.batch_interval_ms));
        }
        if let Some(update) = shared.take_update() {
            if let Err(e) = node.apply_update(&update) {
                warn!("rejected parameter update v{}: {e}", update.version);
            }
        }
        let (preds, selected) = node.process_batch(chunk)?;
        stats.batches += 1;
        stats.selected += selected.len() as u64;
        if uplink.accepts_uploads() {
            shared.enqueue(selected);
        }
        predictions.extend(preds);
        uplink.after_batch(shared)?;
    }
    uplink.finish(shared)?;
    stats.predictions = predictions.len() as u64;
    stats.uploads = uplink.uploads();
    stats.dropped_ids = shared.dropped_ids();
    stats.drops = stats.dropped_ids.len() as u64;
    stats.abandoned = shared.queue_len() as u64;
    stats.updates_received = shared.updates_received();
    stats.updates_rejected = node.updates_rejected();
    stats.versions_applied = node.versions_applied().to_vec();
    stats.final_version = node.version();
    Ok(EdgeRun {
        predictions,
        stats,
        transport_error: uplink.failure(),
    })
}

/// Runs a stream with no cloud.
pub fn run_offline(node: &mut EdgeNode, stream: &[Sample], cfg: &EdgeConfig) -> Result<EdgeRun> {
    let shared = EdgeShared::new(cfg.queue_capacity, cfg.update_interval);
    run_stream(node, stream, cfg, &shared, &mut Offline)
}
