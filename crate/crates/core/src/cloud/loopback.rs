use super::core::{CloudCore, StepRecord};
use crate::edge::{EdgeShared, Uplink};
use crate::error::{Error, Result};
use crate::sample::Sample;
use crate::wire::{self, Message, WireSample};

/// In-process, deterministic link from one edge to a [`CloudCore`].
///
/// After every inference batch the whole upload queue is encoded as one
/// `SampleBatch`, decoded on the cloud side and pooled; each resulting
/// update is encoded, decoded and posted to the edge mailbox before the next
/// batch starts. Message bytes go through the wire codec exactly as over TCP,
/// so reported sizes are real payload sizes.
pub struct LoopbackUplink<'a> {
    cloud: &'a mut CloudCore,
    seq: u64,
    uploads: u64,
    update_bytes: u64,
    upload_bytes: u64,
    uploaded_ids: Vec<u64>,
    steps: Vec<StepRecord>,
}

impl<'a> LoopbackUplink<'a> {
    pub fn new(cloud: &'a mut CloudCore) -> Self {
        Self {
            cloud,
            seq: 0,
            uploads: 0,
            update_bytes: 0,
            upload_bytes: 0,
            uploaded_ids: Vec::new(),
            steps: Vec::new(),
        }
    }

    /// Total `ParamUpdate` payload bytes sent to the edge.
    pub fn update_bytes(&self) -> u64 {
        self.update_bytes
    }

    /// Total `SampleBatch` payload bytes sent to the cloud.
    pub fn upload_bytes(&self) -> u64 {
        self.upload_bytes
    }

    /// Ids of uploaded samples in upload order.
    pub fn uploaded_ids(&self) -> &[u64] {
        &self.uploaded_ids
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }
}

impl Uplink for LoopbackUplink<'_> {
    fn after_batch(&mut self, shared: &EdgeShared) -> Result<()> {
        let items = shared.take_all();
        if items.is_empty() {
            return Ok(());
        }
        self.seq += 1;
        let samples = items
            .iter()
            .map(|q| WireSample {
                sample_id: q.sample.id,
                features: q.sample.features.clone(),
            })
            .collect();
        let bytes = wire::encode(&Message::SampleBatch {
            seq: self.seq,
            samples,
        })?;
        self.upload_bytes += bytes.len() as u64;
        let received = match wire::decode(&bytes)? {
            Message::SampleBatch { samples, .. } => samples,
            other => {
                return Err(Error::Internal(format!(
                    "loopback decoded {:?}",
                    other.message_type()
                )))
            }
        };
        self.uploads += received.len() as u64;
        self.uploaded_ids
            .extend(received.iter().map(|w| w.sample_id));
        let pooled = received
            .into_iter()
            .map(|w| Sample::new(w.sample_id, w.features))
            .collect();
        for (record, update) in self.cloud.submit(pooled) {
            let bytes = wire::encode(&Message::ParamUpdate(update))?;
            self.update_bytes += bytes.len() as u64;
            match wire::decode(&bytes)? {
                Message::ParamUpdate(set) => {
                    shared.deliver(set);
                }
                other => {
                    return Err(Error::Internal(format!(
                        "loopback decoded {:?}",
                        other.message_type()
                    )))
                }
            }
            self.steps.push(record);
        }
        Ok(())
    }

    fn finish(&mut self, _: &EdgeShared) -> Result<()> {
        Ok(())
    }

    fn uploads(&self) -> u64 {
        self.uploads
    }
}
