use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::mailbox::UpdateMailbox;
use super::queue::{QueuedSample, UploadQueue};
use crate::error::{Error, Result};
use crate::filtration::{FiltrationConfig, FiltrationState};
use crate::nn::{argmax, softmax_entropy, AffineParamSet, Model};
use crate::sample::{features_tensor, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeConfig {
    /// Inference batch size `B`.
    pub batch_size: usize,
    /// Apply every `K`-th received parameter update.
    pub update_interval: usize,
    pub queue_capacity: usize,
    /// Cloud address; `None` runs offline.
    pub cloud: Option<String>,
    pub edge_id: u32,
    /// How long the end of a stream waits for queued uploads to be acknowledged.
    pub flush_timeout_ms: u64,
    pub reconnect_delay_ms: u64,
    /// Arrival time of one batch; the loop sleeps this long between
    /// batches. Zero replays a stream as fast as inference runs.
    pub batch_interval_ms: u64,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            update_interval: 1,
            queue_capacity: 256,
            cloud: None,
            edge_id: 0,
            flush_timeout_ms: 5_000,
            reconnect_delay_ms: 200,
            batch_interval_ms: 0,
        }
    }
}

impl EdgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("edge batch size must be at least 1"));
        }
        if self.update_interval == 0 {
            return Err(Error::config("update interval must be at least 1"));
        }
        Ok(())
    }

    pub fn flush_timeout(&self) -> Duration {
        Duration::from_millis(self.flush_timeout_ms)
    }
}

/// Per-sample inference record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: u64,
    pub class: u32,
    /// Maximum softmax probability.
    pub confidence: f32,
    pub entropy: f32,
    /// Passed the filtration rule.
    pub selected: bool,
    /// Parameter version the prediction was made with.
    pub version: u64,
}

/// Counters for one edge run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeStats {
    pub predictions: u64,
    pub batches: u64,
    pub selected: u64,
    pub uploads: u64,
    /// Samples discarded by the queue overflow policy.
    pub drops: u64,
    pub dropped_ids: Vec<u64>,
    /// Samples still queued when the run ended.
    pub abandoned: u64,
    pub updates_received: u64,
    pub updates_rejected: u64,
    pub versions_applied: Vec<u64>,
    pub final_version: u64,
}

/// State shared between the inference loop and a transport: the upload
/// queue and the update mailbox.
#[derive(Debug)]
pub struct EdgeShared {
    queue: Mutex<UploadQueue>,
    ready: Condvar,
    mailbox: Mutex<UpdateMailbox>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl EdgeShared {
    pub fn new(queue_capacity: usize, update_interval: usize) -> Self {
        Self {
            queue: Mutex::new(UploadQueue::new(queue_capacity)),
            ready: Condvar::new(),
            mailbox: Mutex::new(UpdateMailbox::new(update_interval)),
        }
    }

    /// Enqueues samples under the overflow policy and wakes the transport.
    pub fn enqueue(&self, items: Vec<QueuedSample>) {
        if items.is_empty() {
            return;
        }
        let mut q = lock(&self.queue);
        for item in items {
            q.push(item);
        }
        drop(q);
        self.ready.notify_all();
    }

    pub fn take_all(&self) -> Vec<QueuedSample> {
        lock(&self.queue).take_all()
    }

    /// Waits up to `timeout` for the queue to become non-empty, then takes
    /// everything in it.
    pub fn wait_take_all(&self, timeout: Duration) -> Vec<QueuedSample> {
        let q = lock(&self.queue);
        let (mut q, _) = self
            .ready
            .wait_timeout_while(q, timeout, |q| q.is_empty())
            .unwrap_or_else(|e| e.into_inner());
        q.take_all()
    }

    pub fn queue_len(&self) -> usize {
        lock(&self.queue).len()
    }

    pub fn dropped_ids(&self) -> Vec<u64> {
        lock(&self.queue).dropped_ids().to_vec()
    }

    pub fn wake(&self) {
        self.ready.notify_all();
    }

    pub fn deliver(&self, update: AffineParamSet) -> bool {
        lock(&self.mailbox).deliver(update)
    }

    pub fn take_update(&self) -> Option<AffineParamSet> {
        lock(&self.mailbox).take()
    }

    pub fn updates_received(&self) -> u64 {
        lock(&self.mailbox).received()
    }
}

/// Forward-only edge model with its filtration state and parameter version.
#[derive(Debug, Clone)]
pub struct EdgeNode {
    model: Model<f32>,
    filtration: FiltrationState,
    version: u64,
    versions_applied: Vec<u64>,
    updates_rejected: u64,
}

impl EdgeNode {
    pub fn new(model: Model<f32>, filtration: FiltrationConfig) -> Result<Self> {
        if filtration.num_classes != model.num_classes() {
            return Err(Error::config(format!(
                "filtration configured for {} classes, model has {}",
                filtration.num_classes,
                model.num_classes()
            )));
        }
        Ok(Self {
            model,
            filtration: FiltrationState::new(filtration)?,
            version: 0,
            versions_applied: Vec::new(),
            updates_rejected: 0,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn filtration(&self) -> &FiltrationState {
        &self.filtration
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn versions_applied(&self) -> &[u64] {
        &self.versions_applied
    }

    pub fn updates_rejected(&self) -> u64 {
        self.updates_rejected
    }

    /// Replaces the affine parameters if the update is newer than the current
    /// version. Returns whether it was applied. An incompatible update is
    /// rejected, counted and leaves the model untouched.
    pub fn apply_update(&mut self, update: &AffineParamSet) -> Result<bool> {
        if update.version <= self.version {
            return Ok(false);
        }
        if let Err(e) = self.model.apply_affine(update) {
            self.updates_rejected += 1;
            return Err(e);
        }
        self.version = update.version;
        self.versions_applied.push(update.version);
        Ok(true)
    }

    /// Infers one batch with running statistics, scores every sample and
    /// folds the batch entropies into the threshold. Returns the predictions
    /// and the samples selected for upload (labels stripped).
    pub fn process_batch(
        &mut self,
        batch: &[Sample],
    ) -> Result<(Vec<Prediction>, Vec<QueuedSample>)> {
        let x = features_tensor(batch)?;
        let logits = self.model.infer(&x)?;
        let (probs, entropies) = softmax_entropy(&logits)?;
        let mut predictions = Vec::with_capacity(batch.len());
        let mut selected = Vec::new();
        for (r, sample) in batch.iter().enumerate() {
            let row = probs.row(r);
            let class = argmax(row);
            let entropy = entropies[r] as f64;
            let mut keep = self.filtration.score(entropy);
            if keep && self.filtration.config().redundancy_enabled {
                let p: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                keep = self.filtration.redundancy_pass(&p);
            }
            if keep {
                selected.push(QueuedSample {
                    sample: Sample::new(sample.id, sample.features.clone()),
                    entropy,
                });
            }
            predictions.push(Prediction {
                id: sample.id,
                class: class as u32,
                confidence: row[class],
                entropy: entropies[r],
                selected: keep,
                version: self.version,
            });
        }
        let ent: Vec<f64> = entropies.iter().map(|&e| e as f64).collect();
        self.filtration.update_threshold(&ent);
        Ok((predictions, selected))
    }
}
